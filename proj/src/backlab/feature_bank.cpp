#include "backlab/feature_bank.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace backlab::analysis {

void FeatureBank::validate() const {
    check(n >= 0 && d > 0, "feature bank: bad dimensions ", n, "x", d);
    check(feats.size() == static_cast<std::size_t>(n) * d, "feature bank: feature storage is ",
          feats.size(), " values, expected ", static_cast<std::size_t>(n) * d);
    check(static_cast<int>(labels.size()) == n, "feature bank: ", labels.size(), " labels for ",
          n, " rows");
    check(static_cast<int>(poison.size()) == n, "feature bank: ", poison.size(),
          " poison flags for ", n, " rows");
    check(num_classes > 0, "feature bank: num_classes must be positive");
    for (int i = 0; i < n; ++i)
        check(labels[i] >= 0 && labels[i] < num_classes, "feature bank: label ", labels[i],
              " at row ", i, " outside [0,", num_classes, ")");
}

namespace {
template <class T>
void put(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}
}  // namespace

void FeatureBank::save(const std::string& path) const {
    validate();
    std::ofstream out(path, std::ios::binary);
    check(out.good(), "FeatureBank::save: cannot write ", path);
    out.write("BKFB", 4);
    put<std::uint32_t>(out, 1);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(n));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    put<std::uint32_t>(out, 1);  // float32
    put<std::uint32_t>(out, static_cast<std::uint32_t>(num_classes));
    out.write(reinterpret_cast<const char*>(feats.data()),
              static_cast<std::streamsize>(feats.size() * sizeof(float)));
    for (int i = 0; i < n; ++i) put<std::int32_t>(out, labels[i]);
    std::vector<std::uint8_t> bits((n + 7) / 8, 0);
    for (int i = 0; i < n; ++i)
        if (poison[i]) bits[static_cast<std::size_t>(i) / 8] |= (1u << (i % 8));
    out.write(reinterpret_cast<const char*>(bits.data()),
              static_cast<std::streamsize>(bits.size()));
    check(out.good(), "FeatureBank::save: write failed for ", path);
}

FeatureBank FeatureBank::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "FeatureBank::load: cannot open ", path);
    char magic[4];
    in.read(magic, 4);
    check(in.good() && std::memcmp(magic, "BKFB", 4) == 0, "FeatureBank::load: ", path,
          " is not a feature bank file");
    const auto version = get<std::uint32_t>(in);
    check(version == 1, "FeatureBank::load: unsupported version ", version);
    FeatureBank b;
    b.n = static_cast<int>(get<std::uint32_t>(in));
    b.d = static_cast<int>(get<std::uint32_t>(in));
    const auto dtype = get<std::uint32_t>(in);
    check(dtype == 1, "FeatureBank::load: unsupported dtype code ", dtype);
    b.num_classes = static_cast<int>(get<std::uint32_t>(in));
    b.feats.resize(static_cast<std::size_t>(b.n) * b.d);
    in.read(reinterpret_cast<char*>(b.feats.data()),
            static_cast<std::streamsize>(b.feats.size() * sizeof(float)));
    b.labels.resize(b.n);
    for (int i = 0; i < b.n; ++i) b.labels[i] = static_cast<int>(get<std::int32_t>(in));
    std::vector<std::uint8_t> bits((b.n + 7) / 8);
    in.read(reinterpret_cast<char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
    check(in.good(), "FeatureBank::load: truncated file ", path);
    b.poison.resize(b.n);
    for (int i = 0; i < b.n; ++i)
        b.poison[i] = (bits[static_cast<std::size_t>(i) / 8] >> (i % 8)) & 1u;
    b.validate();
    return b;
}

double row_distance(const FeatureBank& bank, int i, int j) {
    const float* a = bank.row(i);
    const float* b = bank.row(j);
    double s = 0.0;
    for (int k = 0; k < bank.d; ++k) {
        const double diff = static_cast<double>(a[k]) - b[k];
        s += diff * diff;
    }
    return std::sqrt(s);
}

}  // namespace backlab::analysis
