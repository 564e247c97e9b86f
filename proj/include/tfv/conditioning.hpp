#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tfv/autodiff.hpp"
#include "tfv/condition_bundle.hpp"
#include "tfv/random.hpp"
#include "tfv/tensor.hpp"

namespace tfv {

enum class Shape : int { circle = 0, square = 1, triangle = 2 };
enum class Color : int { red = 0, yellow = 1, green = 2, cyan = 3, blue = 4, magenta = 5 };
// Compass directions counter-clockwise from east, 45 degrees apart.
enum class Direction : int { E = 0, NE = 1, N = 2, NW = 3, W = 4, SW = 5, S = 6, SE = 7 };
enum class Speed : int { slow = 0, fast = 1 };

inline constexpr int kNumShapes = 3;
inline constexpr int kNumColors = 6;
inline constexpr int kNumDirections = 8;
inline constexpr int kNumSpeeds = 2;
inline constexpr int kCaptionCodeWidth = kNumShapes + kNumColors + kNumDirections + kNumSpeeds;

std::string_view to_string(Shape s);
std::string_view to_string(Color c);
std::string_view to_string(Direction d);
std::string_view to_string(Speed s);
Shape parse_shape(std::string_view s);
Color parse_color(std::string_view s);
Direction parse_direction(std::string_view s);
Speed parse_speed(std::string_view s);

// Structured caption: what a prompt says about one sprite.
struct CaptionSpec {
    Shape shape = Shape::circle;
    Color color = Color::red;
    Direction direction = Direction::E;
    Speed speed = Speed::slow;
    bool has_motion_words = true;

    bool operator==(const CaptionSpec&) const = default;
};

// "shape=circle color=red direction=E speed=slow motion=1"
std::string to_record(const CaptionSpec& spec);
CaptionSpec parse_caption_record(std::string_view record);

// Every (shape, color, direction, speed) combination with motion words.
std::vector<CaptionSpec> all_caption_specs();

// One-hot blocks shape | color | direction | speed, with direction and speed
// zeroed when the caption carries no motion words.
std::array<double, kCaptionCodeWidth> caption_code(const CaptionSpec& spec);

// Deterministic caption encoder: the one-hot code mapped through a seeded
// matrix with orthonormal columns into embed_dim.
class CaptionEncoder {
public:
    CaptionEncoder(int embed_dim, std::uint64_t codebook_seed);

    std::vector<double> encode(const CaptionSpec& spec) const;
    int embed_dim() const { return embed_dim_; }
    std::uint64_t seed() const { return seed_; }

private:
    int embed_dim_;
    std::uint64_t seed_;
    std::vector<double> basis_; // embed_dim x kCaptionCodeWidth, row-major
};

std::vector<double> encode_caption(const CaptionSpec& spec, int embed_dim,
                                   std::uint64_t codebook_seed);

// Small convolutional image encoder. Its parameters live in the shared
// parameter collection under the "img_enc." prefix and are trained jointly
// with the denoiser.
struct ImageEncoderShape {
    int channels = 3;
    int width = 32;
    int embed_dim = 64;
};

void init_image_encoder(std::map<std::string, Tensor>& params, const ImageEncoderShape& shape,
                        Rng& rng);
size_t image_encoder_param_count(const ImageEncoderShape& shape);

// Builds the encoder on `g` for a single frame (1, C, H, W).
ad::Var image_encoder_graph(ad::Graph& g, const std::map<std::string, Tensor>& params,
                            const VideoTensor& frame);

int center_frame_index(int frames);

// Embedding of frame floor(F/2).
std::vector<double> encode_center_frame(const std::map<std::string, Tensor>& params,
                                        const VideoTensor& video);
// Embedding of one specific frame.
std::vector<double> encode_frame(const std::map<std::string, Tensor>& params,
                                 const VideoTensor& video, int frame);

struct DropDecision {
    bool text = false;
    bool image = false;
};

// Two independent Bernoulli draws; always consumes exactly two uniforms.
DropDecision draw_drops(double p_drop_text, double p_drop_image, Rng& rng);

// Independently nulls the text slot with p_drop_text and the image slot with
// p_drop_image. Null slots are replaced by learned null tokens downstream.
ConditionBundle drop_conditions(const ConditionBundle& bundle, double p_drop_text,
                                double p_drop_image, Rng& rng);

} // namespace tfv
