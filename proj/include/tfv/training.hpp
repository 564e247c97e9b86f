#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "tfv/conditioning.hpp"
#include "tfv/data.hpp"
#include "tfv/denoiser.hpp"
#include "tfv/diffusion.hpp"

namespace tfv {

enum class Regime { text_free, semi_supervised, fully_supervised };
const char* to_string(Regime r);
Regime parse_regime(const std::string& s);

struct ScheduleConfig {
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;

    NoiseSchedule make() const { return make_linear_schedule(T, beta_start, beta_end); }
    bool operator==(const ScheduleConfig&) const = default;
};

struct TrainConfig {
    double learning_rate = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    double adam_eps = 1e-8;
    double clip_norm = 1.0; // global gradient norm; <= 0 disables clipping
    double lam = 0.1;
    int batch_size = 8;
    double image_batch_fraction = 0.5;
    // Share of video items drawn from the captioned video corpus in the
    // semi-supervised regime.
    double paired_fraction = 0.5;
    double p_drop_text = 0.1;
    double p_drop_image = 0.1;
    // Probability that an item carries structural maps when the model
    // consumes them; each kind is then kept with probability 1/2.
    double structural_prob = 0.5;
    std::int64_t total_steps = 1000;
    std::uint64_t seed = 0;
    Regime regime = Regime::text_free;
    bool coherence_enabled = true;
    CoherenceSpace coherence_space = CoherenceSpace::velocity;
    // false: spatial modules on image batches first, then temporal modules
    // alone on video batches.
    bool joint = true;
    double spatial_stage_fraction = 0.5;
    std::int64_t checkpoint_every = 0; // 0: final checkpoint only
    std::uint64_t init_seed = 0;
    std::uint64_t codebook_seed = 0;
    DenoiserConfig model;
    ScheduleConfig schedule;

    // Throws ConfigError naming the offending field.
    void validate() const;
    std::int64_t spatial_steps() const;
};

nlohmann::json to_json(const TrainConfig& c);
// Missing fields keep their defaults; unknown fields are rejected. `path`
// prefixes field names in error messages.
TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path = "train");

// A corpus rendered into memory, with structural maps when requested.
struct TrainingPool {
    CorpusKind kind = CorpusKind::image_text;
    std::vector<VideoTensor> videos;
    std::vector<SpriteVideoSpec> specs;
    std::vector<std::optional<CaptionSpec>> captions; // as visible to training
    std::vector<StructuralMaps> structural;           // full maps, empty if not requested

    size_t size() const { return videos.size(); }
};

TrainingPool make_training_pool(const Corpus& corpus, bool with_structural);

struct TrainingData {
    std::optional<TrainingPool> images;
    std::optional<TrainingPool> text_free;
    std::optional<TrainingPool> paired;
};

struct TrainBatch {
    std::vector<BatchItem> items;
};

// Items are independent Bernoulli(image_batch_fraction) draws between the
// content branch and the regime's video branch.
TrainBatch make_train_batch(const TrainingData& data, const TrainConfig& config,
                            const CaptionEncoder& captions, int timesteps, Rng& rng,
                            double image_fraction);
TrainBatch make_train_batch(const TrainingData& data, const TrainConfig& config,
                            const CaptionEncoder& captions, int timesteps, Rng& rng);

struct LossReport {
    std::int64_t step = 0;
    double base = 0.0;
    double coherence = 0.0;
    double total = 0.0;
    std::array<double, kNumBranches> branch_total{};
    std::array<int, kNumBranches> branch_count{};
    double grad_norm = 0.0;
};

nlohmann::json to_json(const LossReport& r);
LossReport loss_report_from_json(const nlohmann::json& j);

struct AdamState {
    ParamStore m;
    ParamStore v;
    std::int64_t t = 0;
};

// Which parameters an update may touch.
enum class ParamGroup { all, spatial, temporal };

// One optimizer update on the batch-mean total loss.
LossReport train_step(DenoiserParams& params, AdamState& opt, const TrainBatch& batch,
                      const NoiseSchedule& sched, const TrainConfig& config,
                      std::int64_t step = 0, ParamGroup group = ParamGroup::all);

// Mean loss and gradients without updating anything.
LossAndGrad batch_loss(const DenoiserParams& params, const TrainBatch& batch,
                       const NoiseSchedule& sched, const TrainConfig& config);

struct TrainResult {
    DenoiserParams params;
    std::vector<LossReport> curve;
    // Batch items that carried a caption embedding, by frame count > 1.
    std::int64_t captioned_video_items = 0;
    std::int64_t captioned_image_items = 0;
};

struct TrainOutputs {
    std::filesystem::path dir; // empty: keep everything in memory
    bool resume = false;
    // Called after every step; used by tests to inspect batches.
    std::function<void(std::int64_t, const TrainBatch&)> observe_batch;
    // Stop after this many steps in this invocation (simulated interruption).
    std::optional<std::int64_t> stop_after;
};

// Checkpoints go to dir/checkpoints/step_NNNNNNNN.ckpt and dir/final.ckpt; the
// loss curve to dir/loss.jsonl.
TrainResult train(const TrainConfig& config, const TrainingData& data,
                  const TrainOutputs& outputs = {});

Checkpoint make_train_checkpoint(const DenoiserParams& params, const AdamState& opt,
                                 const TrainConfig& config, std::int64_t step);

struct GradCheckOptions {
    double epsilon = 1e-5;
    int samples_per_tensor = 3;
    std::uint64_t seed = 0;
    // Relative error is |a - n| / max(|a| + |n|, floor).
    double floor = 1e-5;
    // Negate one analytic entry to confirm the check can fail.
    bool corrupt = false;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    size_t worst_index = 0;
    int checked = 0;
};

using LossGradFn = std::function<std::pair<double, ParamStore>(const ParamStore&)>;

// Central differences on a random subsample of every tensor in `params`.
GradCheckResult grad_check(const ParamStore& params, const LossGradFn& fn,
                           const GradCheckOptions& opts);
// The batch-mean total loss of the denoiser.
GradCheckResult grad_check(const DenoiserParams& params, const TrainBatch& batch,
                           const NoiseSchedule& sched, const TrainConfig& config,
                           const GradCheckOptions& opts);

} // namespace tfv
