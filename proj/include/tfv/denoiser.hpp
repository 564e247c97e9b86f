#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "tfv/autodiff.hpp"
#include "tfv/condition_bundle.hpp"
#include "tfv/diffusion.hpp"
#include "tfv/tensor.hpp"

namespace tfv {

using ParamStore = std::map<std::string, Tensor>;

// Factorized spatio-temporal encoder/decoder. Level i of the encoder has
// base_width channels at i == 0 and 2 * base_width below; each level runs a
// spatial residual block (frame-local) followed by a temporal block (per-pixel
// temporal convolution; self-attention over frames at the bottleneck).
struct DenoiserConfig {
    int video_channels = 3;
    // video_channels, or video_channels + 4 when structural maps are consumed.
    int in_channels = 3;
    int base_width = 32;
    int depth = 2;
    int embed_dim = 64;
    bool temporal_enabled = true;

    bool structural() const { return in_channels > video_channels; }
    int level_channels(int level) const { return level == 0 ? base_width : 2 * base_width; }
    // Throws ConfigError when inconsistent; height/width are checked if > 0.
    void validate(int height = 0, int width = 0) const;

    bool operator==(const DenoiserConfig&) const = default;
};

nlohmann::json to_json(const DenoiserConfig& c);
DenoiserConfig denoiser_config_from_json(const nlohmann::json& j);

struct DenoiserParams {
    DenoiserConfig config;
    std::uint64_t init_seed = 0;
    ParamStore tensors;

    size_t count() const;
};

// Temporal-block parameters carry ".temporal." in their name.
bool is_temporal_param(const std::string& name);

DenoiserParams init_denoiser(const DenoiserConfig& config, std::uint64_t seed);

// Closed-form number of scalar parameters for a configuration.
size_t denoiser_param_count(const DenoiserConfig& config);

// Conditions as they enter the graph. The image embedding may already live on
// the graph (computed by the jointly trained encoder) or be a constant vector.
struct GraphConditions {
    std::optional<std::vector<double>> text;
    std::optional<std::vector<double>> image;
    std::optional<ad::Var> image_var;
    const StructuralMaps* structural = nullptr;
};

// Sinusoidal timestep features of width dim.
std::vector<double> timestep_features(int t, int dim);

ad::Var denoiser_graph(ad::Graph& g, const DenoiserParams& params, ad::Var x_t, int t,
                       const GraphConditions& cond);

// Inference forward pass: x_t (F, C, H, W) -> predicted v of the same shape.
VideoTensor denoise(const DenoiserParams& params, const VideoTensor& x_t, int t,
                    const ConditionBundle& cond);

DenoiseFn make_denoise_fn(const DenoiserParams& params);

enum class Branch : int { content = 0, motion = 1, paired = 2 };
inline constexpr int kNumBranches = 3;
const char* to_string(Branch b);

// Where the frame-difference penalty is measured.
enum class CoherenceSpace { velocity, data };

// One training example with its sampled timestep and noise.
struct BatchItem {
    VideoTensor x0;
    int t = 0;
    VideoTensor noise;
    Branch branch = Branch::content;
    std::optional<std::vector<double>> text_embedding;
    // When set, the image slot is filled by encoding this clean frame on the
    // graph, so the encoder receives gradients.
    std::optional<VideoTensor> image_source;
    std::optional<StructuralMaps> structural;
};

struct ItemLoss {
    double base = 0.0;
    double coherence = 0.0;
    double total = 0.0;
};

struct LossAndGrad {
    ItemLoss loss;
    ParamStore grads; // one entry per parameter, zero where untouched
};

// Forward through q_sample, the denoiser and both losses, then backward.
// Gradients are of `weight * total` (weight lets callers average a batch).
LossAndGrad forward_with_loss(const DenoiserParams& params, const BatchItem& item,
                              const NoiseSchedule& sched, double lam,
                              CoherenceSpace space = CoherenceSpace::velocity,
                              double weight = 1.0);

// Checkpoint archive. Binary little-endian layout:
//   magic "TFVCKPT\0" | u32 version | u32 meta_len | meta JSON (UTF-8)
//   | u32 n_arrays | n_arrays x { u16 name_len | name | u8 dtype (1 = f64)
//   | u8 rank | rank x u32 dims | row-major data }
//   | u64 FNV-1a of all preceding bytes
struct Checkpoint {
    nlohmann::json meta;
    std::map<std::string, Tensor> arrays;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Written to path + ".tmp" and renamed into place.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Parameters go under "param/<name>"; meta holds config, init_seed and step.
Checkpoint make_checkpoint(const DenoiserParams& params, std::int64_t step);
DenoiserParams params_from_checkpoint(const Checkpoint& ckpt);

std::uint64_t fnv1a64(const void* data, size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);

} // namespace tfv
