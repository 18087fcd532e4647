#include "rils/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rils/errors.hpp"

namespace rils {

size_t masked_count(size_t n_patches, double ratio) {
    return static_cast<size_t>(std::llround(ratio * static_cast<double>(n_patches)));
}

MaskPlan sample_mask(size_t n_patches, double ratio, Rng& rng) {
    if (n_patches < 1) throw ConfigError("sample_mask: n_patches must be >= 1");
    if (!(ratio >= 0.0 && ratio <= 1.0))
        throw ConfigError("sample_mask: ratio " + std::to_string(ratio) + " outside [0,1]");

    MaskPlan plan;
    plan.n_patches = n_patches;
    plan.shuffle_perm.resize(n_patches);
    std::iota(plan.shuffle_perm.begin(), plan.shuffle_perm.end(), size_t{0});
    std::shuffle(plan.shuffle_perm.begin(), plan.shuffle_perm.end(), rng);

    plan.restore_perm.resize(n_patches);
    for (size_t i = 0; i < n_patches; ++i) plan.restore_perm[plan.shuffle_perm[i]] = i;

    // First m entries of a uniform permutation form a uniform
    // without-replacement sample.
    const size_t m = masked_count(n_patches, ratio);
    plan.masked_idx.assign(plan.shuffle_perm.begin(), plan.shuffle_perm.begin() + static_cast<long>(m));
    plan.visible_idx.assign(plan.shuffle_perm.begin() + static_cast<long>(m), plan.shuffle_perm.end());
    std::sort(plan.masked_idx.begin(), plan.masked_idx.end());
    std::sort(plan.visible_idx.begin(), plan.visible_idx.end());
    return plan;
}

}  // namespace rils
