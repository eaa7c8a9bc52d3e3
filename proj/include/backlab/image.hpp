#pragma once
// Image container (HWC, floating point in [0,1]) and 8-bit PNG I/O.

#include <string>
#include <vector>

namespace backlab {

struct Image {
    int h = 0, w = 0, c = 0;
    std::vector<double> v;  // row-major, channel-interleaved (HWC)

    Image() = default;
    Image(int h_, int w_, int c_, double fill = 0.0)
        : h(h_), w(w_), c(c_), v(static_cast<std::size_t>(h_) * w_ * c_, fill) {}

    double& at(int y, int x, int ch) { return v[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
    double at(int y, int x, int ch) const {
        return v[(static_cast<std::size_t>(y) * w + x) * c + ch];
    }
    std::size_t numel() const { return v.size(); }
    bool same_shape(const Image& o) const { return h == o.h && w == o.w && c == o.c; }
};

// Clamp all pixels into [0,1].
void clip01(Image& img);

double max_abs_diff(const Image& a, const Image& b);

// 8-bit PNG. Write quantizes with round-half-away-from-zero after clipping;
// read maps byte k to k/255. 1- and 3-channel images supported.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

}  // namespace backlab
