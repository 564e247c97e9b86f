#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "tfv/conditioning.hpp"
#include "tfv/data.hpp"
#include "tfv/tensor.hpp"

namespace tfv {

// Frozen frame embedder shared by the consistency and Fréchet metrics. It is
// the image-encoder architecture at a fixed seed, identical for every run
// being compared.
struct Embedder {
    std::map<std::string, Tensor> params;
    int embed_dim = 0;
};

Embedder make_reference_embedder(std::uint64_t seed, int channels = 3, int width = 16,
                                 int embed_dim = 32);
std::vector<double> embed_frame(const Embedder& e, const VideoTensor& video, int frame);

// Mean cosine similarity of adjacent embeddings over all pairs of all
// sequences.
double mean_adjacent_cosine(const std::vector<std::vector<std::vector<double>>>& sequences);
// Mean cosine similarity of adjacent-frame embeddings over all pairs.
double frame_consistency(const std::vector<VideoTensor>& videos, const Embedder& e);

// Mean |proxy(generated) - condition| over all pixels and frames; conditions
// are (F, 1, H, W).
double depth_error(const std::vector<VideoTensor>& videos, const std::vector<Tensor>& depth);
double sketch_error(const std::vector<VideoTensor>& videos, const std::vector<Tensor>& sketch);

// Per-frame centroid track of the detected sprite.
struct Track {
    std::vector<bool> detected;
    std::vector<double> cx, cy;
    std::vector<double> area, weight_sum;
    int detected_count() const;
};
Track track_sprite(const VideoTensor& video);

// Detectable in at least this share of frames to enter EPE.
inline constexpr double kMinDetectedShare = 0.8;

struct EpeResult {
    double epe = 0.0;
    int items = 0;
    int excluded = 0;
    int pairs = 0;
};

// Centroid displacement between consecutive detected frames against the
// reference flow, the mean of each frame's nonzero motion vectors.
// Maps are (F, 2, H, W). Throws RangeError when every item is excluded.
EpeResult epe(const std::vector<VideoTensor>& videos, const std::vector<Tensor>& motion_maps);

double frechet_distance(const std::vector<std::vector<double>>& a,
                        const std::vector<std::vector<double>>& b, double ridge = 1e-6);
// Video feature: mean frame embedding followed by the mean adjacent-frame
// embedding difference (zeros for stills).
std::vector<double> video_feature(const Embedder& e, const VideoTensor& video);
double frechet_feature_distance(const std::vector<VideoTensor>& generated,
                                const std::vector<VideoTensor>& reference, const Embedder& e);

struct CaptionGuess {
    bool detected = false;
    Shape shape = Shape::circle;
    Color color = Color::red;
    std::optional<Direction> direction; // only for clips with visible motion
    Speed speed = Speed::slow;
    double velocity_x = 0.0;
    double velocity_y = 0.0;
};

// Analytic classifier: hue of the mean chroma, template correlation against
// each shape's coverage, and a least-squares centroid velocity.
CaptionGuess classify_video(const VideoTensor& video);

struct CaptionAccuracy {
    double accuracy = 0.0;
    // shape, color, direction, speed
    std::array<double, 4> per_attribute{};
    std::array<int, 4> counts{};
};

// Direction and speed are scored only for clips (F >= 2) whose caption has
// motion words. Undetectable sprites score 0 on every scored attribute.
CaptionAccuracy caption_accuracy(const std::vector<VideoTensor>& videos,
                                 const std::vector<CaptionSpec>& specs);

struct MetricsReport {
    std::string label;
    std::optional<double> frame_consistency;
    std::optional<double> depth_error;
    std::optional<double> sketch_error;
    std::optional<double> epe;
    std::optional<double> frechet_distance;
    std::optional<double> caption_accuracy;
    std::optional<CaptionAccuracy> caption_breakdown;
    std::map<std::string, std::int64_t> counts;

    nlohmann::json to_json() const;
    static MetricsReport from_json(const nlohmann::json& j);
    // FNV-1a over the canonical JSON without the checksum field.
    std::uint64_t checksum() const;
};

void write_report(const std::filesystem::path& path, const MetricsReport& r);
MetricsReport read_report(const std::filesystem::path& path);

} // namespace tfv
