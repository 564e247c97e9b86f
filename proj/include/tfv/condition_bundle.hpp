#pragma once

#include <optional>
#include <vector>

#include "tfv/tensor.hpp"

namespace tfv {

// Channel layout of the structural condition stack fed to the denoiser.
enum StructuralChannel : int {
    kDepthChannel = 0,
    kSketchChannel = 1,
    kMotionXChannel = 2,
    kMotionYChannel = 3,
    kStructuralChannels = 4,
};

// Per-frame depth / sketch / motion-vector maps, shape (F, 4, H, W).
// Absent kinds are stored as zero channels.
struct StructuralMaps {
    Tensor maps;
    bool has_depth = false;
    bool has_sketch = false;
    bool has_motion = false;

    bool any() const { return has_depth || has_sketch || has_motion; }
};

// Conditions for one denoiser call. An empty optional is a null slot; the
// denoiser substitutes its learned null token for it.
struct ConditionBundle {
    std::optional<std::vector<double>> text_embedding;
    std::optional<std::vector<double>> image_embedding;
    std::optional<StructuralMaps> structural;

    bool text_null() const { return !text_embedding.has_value(); }
    bool image_null() const { return !image_embedding.has_value(); }

    // Guidance branch: text and image nulled, structural maps kept.
    ConditionBundle unconditional() const {
        ConditionBundle out;
        out.structural = structural;
        return out;
    }
};

} // namespace tfv
