#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "tfv/data.hpp"
#include "tfv/diffusion.hpp"
#include "tfv/evaluation.hpp"
#include "tfv/training.hpp"

namespace tfv {

inline constexpr int kRunLayoutVersion = 1;
// Relative output directories are resolved under this variable when set.
inline constexpr const char* kOutRootEnv = "TFV_OUT_ROOT";

struct CorpusSection {
    std::uint64_t seed = 1;
    CorpusDims dims{8, 3, 16, 16, 4.0};
    size_t image_text = 2000;
    size_t text_free_video = 500;
    size_t video_text = 0;
    // Captioned videos never shown to training: prompts, conditions and the
    // Fréchet reference come from here.
    size_t held_out = 64;
    // Render depth/sketch/motion maps next to each item.
    bool conditions = false;

    Corpus make(CorpusKind kind) const;
    Corpus make_held_out() const;
};

enum class StructuralCondition { none, depth, sketch, motion };
const char* to_string(StructuralCondition s);
StructuralCondition parse_structural_condition(const std::string& s);

struct SampleSection {
    SamplerConfig sampler{25, 0.0, 5.0, 7};
    // Explicit prompts (inline records or a prompt file). When both are empty
    // the captions of the first `count` held-out items are used, which also
    // makes their structural maps available as conditions.
    std::vector<CaptionSpec> prompts;
    std::filesystem::path prompt_file;
    size_t count = 64;
    StructuralCondition structural = StructuralCondition::none;
    // Fill the image slot with the held-out item's centre-frame embedding.
    bool image_condition = false;
    bool export_grids = false;
};

struct EvalSection {
    bool frame_consistency = true;
    bool depth_error = true;
    bool sketch_error = true;
    bool epe = true;
    bool frechet_distance = true;
    bool caption_accuracy = true;
    std::uint64_t embedder_seed = 0x5eed;
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::filesystem::path out = "runs/experiment";
    CorpusSection corpus;
    TrainConfig train;
    SampleSection sample;
    EvalSection eval;

    void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
// Strict: unknown fields and type mismatches raise ConfigError with the field
// path. Relative prompt files resolve against `base_dir`.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j,
                                             const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// One caption record per line; blank lines and '#' comments are skipped.
std::vector<CaptionSpec> read_prompt_file(const std::filesystem::path& path);
void write_prompt_file(const std::filesystem::path& path, const std::vector<CaptionSpec>& prompts);

// Output directory layout (version kRunLayoutVersion):
//   run.json                    layout version and the resolved config
//   corpus/<kind>/, corpus/held_out/
//   train/loss.jsonl, train/checkpoints/, train/final.ckpt
//   samples/<label>/            manifest.json, prompts.txt, NNNNN.vid, grids/
//   eval/<label>.json           MetricsReport
struct RunLayout {
    std::filesystem::path root;

    std::filesystem::path corpus_dir(CorpusKind kind) const;
    std::filesystem::path held_out_dir() const;
    std::filesystem::path train_dir() const;
    std::filesystem::path final_checkpoint() const;
    std::filesystem::path samples_dir(const std::string& label) const;
    std::filesystem::path eval_path(const std::string& label) const;
};

std::filesystem::path resolve_output_dir(const std::filesystem::path& out);

// Exclusive lock on a run directory, released on destruction.
class RunLock {
public:
    explicit RunLock(const std::filesystem::path& root);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::filesystem::path path_;
};

// Writes run.json, or checks that an existing one has the same layout
// version and config (up to the sample and eval sections).
void prepare_run_dir(const RunLayout& layout, const ExperimentConfig& c);

// Writes every corpus with a nonzero size plus the held-out set. Corpora
// already on disk with the same contents are left alone.
void cmd_gen_data(const ExperimentConfig& c, const RunLayout& layout);

// Corpora the regime needs, read from the run directory when `layout` is
// given and rendered from the config otherwise.
TrainingData load_training_data(const ExperimentConfig& c, const RunLayout* layout);

TrainResult cmd_train(const ExperimentConfig& c, const RunLayout& layout);

struct SampleSet {
    std::vector<VideoTensor> videos;
    std::vector<CaptionSpec> prompts;
    // Held-out index each sample mirrors; empty for explicit prompts.
    std::vector<size_t> references;
    StructuralCondition structural = StructuralCondition::none;
};

// Generates samples in memory. Rejects checkpoint/config mismatches before
// any compute.
SampleSet generate_samples(const ExperimentConfig& c, const DenoiserParams& params,
                           const Corpus& held_out);

void write_samples(const std::filesystem::path& dir, const SampleSet& s, bool export_grids);
SampleSet read_samples(const std::filesystem::path& dir);

SampleSet cmd_sample(const ExperimentConfig& c, const RunLayout& layout,
                     const std::filesystem::path& checkpoint, const std::string& label);

// Ground-truth renders of the held-out prompts, for noise-floor checks.
SampleSet ground_truth_samples(const ExperimentConfig& c, const Corpus& held_out);

MetricsReport evaluate_samples(const SampleSet& s, const Corpus& held_out, const EvalSection& e,
                               const std::string& label);

MetricsReport cmd_eval(const ExperimentConfig& c, const RunLayout& layout,
                       const std::filesystem::path& samples_dir, const std::string& label);

// Plain-text table, one column per report, one row per metric present in any.
std::string report_table(const std::vector<MetricsReport>& reports);
// Bar chart of one metric across reports.
std::string report_bar_svg(const std::vector<MetricsReport>& reports, const std::string& metric);
// Loss curves (total loss against step), one polyline per labelled curve.
std::string loss_curve_svg(const std::vector<std::pair<std::string, std::vector<LossReport>>>& curves);
std::vector<LossReport> read_loss_curve(const std::filesystem::path& path);

// Writes report.txt, one SVG per metric, and loss.svg when curves are given.
void cmd_report(const std::vector<MetricsReport>& reports,
                const std::vector<std::pair<std::string, std::vector<LossReport>>>& curves,
                const std::filesystem::path& out_dir);

// Frames side by side, upscaled by `scale`, mapped from [-1, 1] to 8 bits.
void write_ppm_grid(const std::filesystem::path& path, const VideoTensor& v, int scale = 4);

} // namespace tfv
