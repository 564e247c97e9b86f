#include "tfv/conditioning.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <sstream>

namespace tfv {

namespace {

constexpr std::array<std::string_view, kNumShapes> kShapeNames{"circle", "square", "triangle"};
constexpr std::array<std::string_view, kNumColors> kColorNames{"red",  "yellow", "green",
                                                               "cyan", "blue",   "magenta"};
constexpr std::array<std::string_view, kNumDirections> kDirectionNames{"E", "NE", "N",  "NW",
                                                                       "W", "SW", "S", "SE"};
constexpr std::array<std::string_view, kNumSpeeds> kSpeedNames{"slow", "fast"};

template <typename E, size_t N>
E parse_enum(std::string_view s, const std::array<std::string_view, N>& names, const char* what) {
    for (size_t i = 0; i < N; ++i)
        if (names[i] == s) return static_cast<E>(i);
    throw ConfigError(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

} // namespace

std::string_view to_string(Shape s) { return kShapeNames.at(static_cast<size_t>(s)); }
std::string_view to_string(Color c) { return kColorNames.at(static_cast<size_t>(c)); }
std::string_view to_string(Direction d) { return kDirectionNames.at(static_cast<size_t>(d)); }
std::string_view to_string(Speed s) { return kSpeedNames.at(static_cast<size_t>(s)); }
Shape parse_shape(std::string_view s) { return parse_enum<Shape>(s, kShapeNames, "shape"); }
Color parse_color(std::string_view s) { return parse_enum<Color>(s, kColorNames, "color"); }
Direction parse_direction(std::string_view s) {
    return parse_enum<Direction>(s, kDirectionNames, "direction");
}
Speed parse_speed(std::string_view s) { return parse_enum<Speed>(s, kSpeedNames, "speed"); }

std::string to_record(const CaptionSpec& spec) {
    std::ostringstream os;
    os << "shape=" << to_string(spec.shape) << " color=" << to_string(spec.color)
       << " direction=" << to_string(spec.direction) << " speed=" << to_string(spec.speed)
       << " motion=" << (spec.has_motion_words ? 1 : 0);
    return os.str();
}

CaptionSpec parse_caption_record(std::string_view record) {
    CaptionSpec spec;
    bool seen[5] = {false, false, false, false, false};
    std::istringstream is{std::string(record)};
    std::string tok;
    while (is >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw ConfigError("caption record token without '=': " + tok);
        const std::string key = tok.substr(0, eq);
        const std::string val = tok.substr(eq + 1);
        if (key == "shape") {
            spec.shape = parse_shape(val);
            seen[0] = true;
        } else if (key == "color") {
            spec.color = parse_color(val);
            seen[1] = true;
        } else if (key == "direction") {
            spec.direction = parse_direction(val);
            seen[2] = true;
        } else if (key == "speed") {
            spec.speed = parse_speed(val);
            seen[3] = true;
        } else if (key == "motion") {
            if (val != "0" && val != "1") throw ConfigError("caption motion flag must be 0 or 1");
            spec.has_motion_words = val == "1";
            seen[4] = true;
        } else {
            throw ConfigError("unknown caption key '" + key + "'");
        }
    }
    for (bool s : seen)
        if (!s) throw ConfigError("caption record missing a field: '" + std::string(record) + "'");
    return spec;
}

std::vector<CaptionSpec> all_caption_specs() {
    std::vector<CaptionSpec> out;
    for (int s = 0; s < kNumShapes; ++s)
        for (int c = 0; c < kNumColors; ++c)
            for (int d = 0; d < kNumDirections; ++d)
                for (int v = 0; v < kNumSpeeds; ++v)
                    out.push_back({static_cast<Shape>(s), static_cast<Color>(c),
                                   static_cast<Direction>(d), static_cast<Speed>(v), true});
    return out;
}

std::array<double, kCaptionCodeWidth> caption_code(const CaptionSpec& spec) {
    std::array<double, kCaptionCodeWidth> code{};
    code[static_cast<int>(spec.shape)] = 1.0;
    code[kNumShapes + static_cast<int>(spec.color)] = 1.0;
    if (spec.has_motion_words) {
        code[kNumShapes + kNumColors + static_cast<int>(spec.direction)] = 1.0;
        code[kNumShapes + kNumColors + kNumDirections + static_cast<int>(spec.speed)] = 1.0;
    }
    return code;
}

CaptionEncoder::CaptionEncoder(int embed_dim, std::uint64_t codebook_seed)
    : embed_dim_(embed_dim), seed_(codebook_seed) {
    if (embed_dim < kCaptionCodeWidth) {
        throw ConfigError("caption encoder needs embed_dim >= " +
                          std::to_string(kCaptionCodeWidth));
    }
    Rng rng = make_rng(codebook_seed, 0xc0de);
    Eigen::MatrixXd gauss(embed_dim, kCaptionCodeWidth);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int j = 0; j < kCaptionCodeWidth; ++j)
        for (int i = 0; i < embed_dim; ++i) gauss(i, j) = n(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(gauss);
    const Eigen::MatrixXd q =
        qr.householderQ() * Eigen::MatrixXd::Identity(embed_dim, kCaptionCodeWidth);
    basis_.resize(static_cast<size_t>(embed_dim) * kCaptionCodeWidth);
    for (int i = 0; i < embed_dim; ++i)
        for (int j = 0; j < kCaptionCodeWidth; ++j)
            basis_[static_cast<size_t>(i) * kCaptionCodeWidth + j] = q(i, j);
}

std::vector<double> CaptionEncoder::encode(const CaptionSpec& spec) const {
    const auto code = caption_code(spec);
    std::vector<double> out(embed_dim_, 0.0);
    for (int i = 0; i < embed_dim_; ++i) {
        double acc = 0.0;
        for (int j = 0; j < kCaptionCodeWidth; ++j)
            acc += basis_[static_cast<size_t>(i) * kCaptionCodeWidth + j] * code[j];
        out[i] = acc;
    }
    return out;
}

std::vector<double> encode_caption(const CaptionSpec& spec, int embed_dim,
                                   std::uint64_t codebook_seed) {
    return CaptionEncoder(embed_dim, codebook_seed).encode(spec);
}

namespace {

Tensor fan_in_normal(std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    for (double& v : t.values()) v = n(rng);
    return t;
}

} // namespace

void init_image_encoder(std::map<std::string, Tensor>& params, const ImageEncoderShape& s,
                        Rng& rng) {
    const int w = s.width;
    params["img_enc.conv1.w"] = fan_in_normal({w, s.channels, 3, 3}, s.channels * 9, rng);
    params["img_enc.conv1.b"] = Tensor({w}, 0.0);
    params["img_enc.conv2.w"] = fan_in_normal({2 * w, w, 3, 3}, w * 9, rng);
    params["img_enc.conv2.b"] = Tensor({2 * w}, 0.0);
    params["img_enc.fc.w"] = fan_in_normal({s.embed_dim, 2 * w}, 2 * w, rng);
    params["img_enc.fc.b"] = Tensor({s.embed_dim}, 0.0);
}

size_t image_encoder_param_count(const ImageEncoderShape& s) {
    const size_t w = s.width, c = s.channels, d = s.embed_dim;
    return (w * c * 9 + w) + (2 * w * w * 9 + 2 * w) + (d * 2 * w + d);
}

ad::Var image_encoder_graph(ad::Graph& g, const std::map<std::string, Tensor>& params,
                            const VideoTensor& frame) {
    if (frame.frames() != 1) throw ShapeError("image encoder expects a single frame");
    auto p = [&](const char* name) { return g.param(name, params.at(name)); };
    ad::Var x = g.constant(frame.tensor());
    ad::Var h = ad::silu(g, ad::conv2d(g, x, p("img_enc.conv1.w"), p("img_enc.conv1.b")));
    h = ad::avg_pool2(g, h);
    h = ad::silu(g, ad::conv2d(g, h, p("img_enc.conv2.w"), p("img_enc.conv2.b")));
    h = ad::global_avg_pool(g, h);
    return ad::linear(g, h, p("img_enc.fc.w"), p("img_enc.fc.b"));
}

int center_frame_index(int frames) {
    if (frames < 1) throw ShapeError("empty video has no center frame");
    return frames / 2;
}

std::vector<double> encode_frame(const std::map<std::string, Tensor>& params,
                                 const VideoTensor& video, int frame) {
    ad::Graph g(false);
    ad::Var e = image_encoder_graph(g, params, video.frame_video(frame));
    return g.value(e).to_vector();
}

std::vector<double> encode_center_frame(const std::map<std::string, Tensor>& params,
                                        const VideoTensor& video) {
    return encode_frame(params, video, center_frame_index(video.frames()));
}

DropDecision draw_drops(double p_drop_text, double p_drop_image, Rng& rng) {
    if (p_drop_text < 0.0 || p_drop_text > 1.0 || p_drop_image < 0.0 || p_drop_image > 1.0) {
        throw RangeError("drop probabilities must lie in [0, 1]");
    }
    DropDecision d;
    d.text = uniform01(rng) < p_drop_text;
    d.image = uniform01(rng) < p_drop_image;
    return d;
}

ConditionBundle drop_conditions(const ConditionBundle& bundle, double p_drop_text,
                                double p_drop_image, Rng& rng) {
    const DropDecision d = draw_drops(p_drop_text, p_drop_image, rng);
    ConditionBundle out = bundle;
    if (d.text) out.text_embedding.reset();
    if (d.image) out.image_embedding.reset();
    return out;
}

} // namespace tfv
