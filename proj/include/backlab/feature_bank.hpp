#pragma once
// Feature bank: per-row embeddings with assigned labels and poison flags.
//
// File layout (little-endian), extension .bkfb:
//   magic  "BKFB"            4 bytes
//   u32    version           (1)
//   u32    N                 rows
//   u32    D                 feature dimension
//   u32    dtype             (1 = float32)
//   u32    num_classes       clean class count C; poisoned rows map to the
//                            reserved pseudo-class id C
//   f32    features          N*D row-major
//   i32    labels            N assigned labels in [0, C)
//   u8     poison bitmap     ceil(N/8) bytes, LSB-first within each byte
// Poisoned rows keep their assigned label in `labels`; the pseudo-class view
// (label C) is derived from the bitmap so both views stay consistent.

#include <string>
#include <vector>

#include "backlab/common.hpp"

namespace backlab::analysis {

struct FeatureBank {
    int n = 0, d = 0, num_classes = 0;
    std::vector<float> feats;  // row-major n x d
    std::vector<int> labels;
    std::vector<bool> poison;

    const float* row(int i) const { return feats.data() + static_cast<std::size_t>(i) * d; }
    int pseudo_label(int i) const { return poison[i] ? num_classes : labels[i]; }
    void validate() const;

    void save(const std::string& path) const;
    static FeatureBank load(const std::string& path);
};

double row_distance(const FeatureBank& bank, int i, int j);

}  // namespace backlab::analysis
