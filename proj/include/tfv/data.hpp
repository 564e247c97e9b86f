#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "tfv/condition_bundle.hpp"
#include "tfv/conditioning.hpp"
#include "tfv/tensor.hpp"

namespace tfv {

// One sprite moving in a straight line over a uniform gray background.
// Positions are the area centroid of the sprite in pixel coordinates, where
// pixel (x, y) covers [x, x + 1) x [y, y + 1).
struct SpriteVideoSpec {
    CaptionSpec caption;
    double size_px = 8.0;
    double start_x = 16.0;
    double start_y = 16.0;
    double velocity_x = 0.0; // pixels per frame; +y points down
    double velocity_y = 0.0;
    std::uint64_t background_seed = 0;

    bool operator==(const SpriteVideoSpec&) const = default;
};

nlohmann::json to_json(const SpriteVideoSpec& s);
SpriteVideoSpec sprite_spec_from_json(const nlohmann::json& j);

// RGB of a hue in [-1, 1].
std::array<double, 3> color_rgb(Color c);
// Unit vector of a compass direction in image coordinates (north is -y).
std::array<double, 2> direction_vector(Direction d);
// Background gray level derived from the seed, in [-0.5, 0.3].
double background_level(std::uint64_t background_seed);

// Largest distance from the centroid to the sprite boundary along x or y.
double sprite_extent(double size_px);
// Pixels per frame for a speed bucket: fast covers 90% of the free travel
// W - 2 * extent - 2 over the clip, slow half of that.
double speed_px_per_frame(Speed s, double size_px, int frames, int width);

bool trajectory_in_bounds(const SpriteVideoSpec& spec, int frames, int height, int width);

// Anti-aliased render (2-pixel tent prefilter), values in [-1, 1]. A darker dot
// of the same hue sits toward the heading: the velocity when nonzero, else
// the caption direction.
VideoTensor render_video(const SpriteVideoSpec& spec, int frames, int height, int width,
                         double frame_rate = 4.0);

// Prefiltered body coverage in [0, 1] of a sprite centred (area centroid) at
// (cx, cy), without the orientation dot. (H, W).
Tensor sprite_coverage(Shape shape, double size_px, double cx, double cy, int height, int width);

// Draws a spec whose attributes come from `caption` with size, start and
// background drawn from `rng`. The trajectory is in bounds by construction.
SpriteVideoSpec sample_sprite_spec(const CaptionSpec& caption, int frames, int height, int width,
                                   Rng& rng);
CaptionSpec sample_caption(Rng& rng, bool has_motion_words = true);

// Saturation-based sprite detector shared by the proxies and the metrics.
struct SpriteDetection {
    Tensor weight;        // (H, W) soft membership clamp((max - min) / 2, 0, 1)
    Tensor mask;          // (H, W) 1 where weight > kMaskThreshold
    double area = 0.0;    // mask pixel count
    double weight_sum = 0.0;
    double cx = 0.0;      // weighted centroid, pixel-centre coordinates
    double cy = 0.0;
    std::array<double, 3> mean_rgb{}; // weighted mean colour inside the mask
};

inline constexpr double kMaskThreshold = 0.2;
// Minimum mask area (pixels) for a frame to count as containing a sprite.
inline constexpr double kMinSpriteArea = 4.0;
inline constexpr double kSketchThreshold = 0.5;

SpriteDetection detect_sprite(const VideoTensor& video, int frame);

// sqrt(mask area) / W inside the mask, 0 elsewhere. (H, W).
Tensor depth_proxy(const VideoTensor& video, int frame);
// 1 where the channel-RMS Sobel magnitude exceeds kSketchThreshold. (H, W).
Tensor sketch_proxy(const VideoTensor& video, int frame);
// Ground-truth flow: the spec velocity inside each rendered frame's mask.
// (F, 2, H, W).
Tensor motion_vector_maps(const SpriteVideoSpec& spec, int frames, int height, int width);
// Re-extracted per-frame proxies stacked as (F, 1, H, W).
Tensor depth_maps(const VideoTensor& video);
Tensor sketch_maps(const VideoTensor& video);

// Stack depth, sketch and motion maps into the denoiser's (F, 4, H, W)
// layout, keeping only the requested kinds.
StructuralMaps make_structural_maps(const Tensor& depth, const Tensor& sketch,
                                    const Tensor& motion, bool use_depth, bool use_sketch,
                                    bool use_motion);
StructuralMaps structural_maps_for(const SpriteVideoSpec& spec, const VideoTensor& video,
                                   bool use_depth, bool use_sketch, bool use_motion);

enum class CorpusKind { image_text, text_free_video, video_text };
const char* to_string(CorpusKind k);
CorpusKind parse_corpus_kind(const std::string& s);

struct CorpusItem {
    SpriteVideoSpec spec;
    // Whether the caption may be shown to training. Text-free videos keep
    // their caption for evaluation only.
    bool caption_available = true;
};

struct CorpusDims {
    int frames = 16;
    int channels = 3;
    int height = 32;
    int width = 32;
    double frame_rate = 4.0;

    bool operator==(const CorpusDims&) const = default;
};

struct Corpus {
    CorpusKind kind = CorpusKind::image_text;
    std::uint64_t seed = 0;
    CorpusDims dims;
    std::vector<CorpusItem> items;

    size_t size() const { return items.size(); }
    VideoTensor render(size_t i) const;
    // Caption visible to the trainer; empty for text-free corpora.
    std::optional<CaptionSpec> training_caption(size_t i) const;
};

// Item i of a corpus depends only on (seed, kind, i).
Corpus make_image_text_pairs(size_t n, std::uint64_t seed, CorpusDims dims);
Corpus make_text_free_videos(size_t n, std::uint64_t seed, CorpusDims dims);
Corpus make_video_text_pairs(size_t n, std::uint64_t seed, CorpusDims dims);
Corpus make_corpus(CorpusKind kind, size_t n, std::uint64_t seed, CorpusDims dims);

// Tensor container: ASCII header line
//   "TFVID 1 <F> <C> <H> <W> <float32|float64> fps=<rate>\n"
// followed by F*C*H*W little-endian values in row-major order.
enum class StoredType { float32, float64 };
void write_vid(const std::filesystem::path& path, const VideoTensor& v,
               StoredType type = StoredType::float32);
VideoTensor read_vid(const std::filesystem::path& path);
// Value as it survives a float32 round trip.
VideoTensor round_to_float32(const VideoTensor& v);

std::uint64_t file_checksum(const std::filesystem::path& path);
std::string checksum_hex(std::uint64_t h);

// Writes `dir/manifest` plus items/NNNNN.vid and, when requested,
// conds/NNNNN.{depth,sketch,mv}. The manifest is JSON lines: a header
// record, one record per item (spec, caption, file checksums) and a trailer
// holding the FNV-1a checksum of all preceding bytes.
void write_corpus(const std::filesystem::path& dir, const Corpus& corpus, bool with_conditions);
// Parses and verifies the manifest and every referenced file.
Corpus read_corpus(const std::filesystem::path& dir);
VideoTensor load_item(const std::filesystem::path& dir, size_t index);

inline constexpr int kManifestVersion = 1;

} // namespace tfv
