#pragma once

#include <cstdint>
#include <vector>

#include "rils/rng.hpp"

namespace rils {

// Per-image partition of patch indices into masked and visible sets, plus the
// shuffle/restore permutations of the draw that produced it.
struct MaskPlan {
    size_t n_patches = 0;
    std::vector<size_t> masked_idx;    // sorted
    std::vector<size_t> visible_idx;   // sorted
    std::vector<size_t> shuffle_perm;  // permutation of [0, n_patches)
    std::vector<size_t> restore_perm;  // inverse of shuffle_perm

    size_t n_masked() const { return masked_idx.size(); }
    size_t n_visible() const { return visible_idx.size(); }
};

// Uniform without-replacement draw of round(ratio * n_patches) masked
// indices; deterministic given the generator state.
MaskPlan sample_mask(size_t n_patches, double ratio, Rng& rng);

// round() half away from zero applied to ratio * n; exposed for tests.
size_t masked_count(size_t n_patches, double ratio);

}  // namespace rils
