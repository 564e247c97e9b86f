#include "tfv/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "tfv/denoiser.hpp"
#include "tfv/random.hpp"

namespace tfv {

nlohmann::json to_json(const SpriteVideoSpec& s) {
    return {{"shape", to_string(s.caption.shape)},
            {"color", to_string(s.caption.color)},
            {"direction", to_string(s.caption.direction)},
            {"speed", to_string(s.caption.speed)},
            {"motion_words", s.caption.has_motion_words},
            {"size", s.size_px},
            {"x", s.start_x},
            {"y", s.start_y},
            {"vx", s.velocity_x},
            {"vy", s.velocity_y},
            {"background_seed", s.background_seed}};
}

SpriteVideoSpec sprite_spec_from_json(const nlohmann::json& j) {
    SpriteVideoSpec s;
    s.caption.shape = parse_shape(j.at("shape").get<std::string>());
    s.caption.color = parse_color(j.at("color").get<std::string>());
    s.caption.direction = parse_direction(j.at("direction").get<std::string>());
    s.caption.speed = parse_speed(j.at("speed").get<std::string>());
    s.caption.has_motion_words = j.at("motion_words").get<bool>();
    s.size_px = j.at("size").get<double>();
    s.start_x = j.at("x").get<double>();
    s.start_y = j.at("y").get<double>();
    s.velocity_x = j.at("vx").get<double>();
    s.velocity_y = j.at("vy").get<double>();
    s.background_seed = j.at("background_seed").get<std::uint64_t>();
    return s;
}

std::array<double, 3> color_rgb(Color c) {
    switch (c) {
    case Color::red: return {1.0, -1.0, -1.0};
    case Color::yellow: return {1.0, 1.0, -1.0};
    case Color::green: return {-1.0, 1.0, -1.0};
    case Color::cyan: return {-1.0, 1.0, 1.0};
    case Color::blue: return {-1.0, -1.0, 1.0};
    case Color::magenta: return {1.0, -1.0, 1.0};
    }
    return {0.0, 0.0, 0.0};
}

std::array<double, 2> direction_vector(Direction d) {
    const double a = static_cast<int>(d) * std::numbers::pi / 4.0;
    double x = std::cos(a), y = -std::sin(a);
    // exact zeros on the axes keep axis-aligned motion free of 1e-17 drift
    if (std::abs(x) < 1e-12) x = 0.0;
    if (std::abs(y) < 1e-12) y = 0.0;
    return {x, y};
}

double background_level(std::uint64_t background_seed) {
    Rng rng = make_rng(background_seed, 0xb6);
    return -0.5 + 0.8 * uniform01(rng);
}

double sprite_extent(double size_px) { return 2.0 * size_px / 3.0; }

double speed_px_per_frame(Speed s, double size_px, int frames, int width) {
    // stills borrow the default clip length so their heading matches videos
    const int span = std::max(frames, 16) - 1;
    const double travel = width - 2.0 * sprite_extent(size_px) - 2.0;
    const double fast = 0.9 * travel / span;
    return s == Speed::fast ? fast : 0.5 * fast;
}

bool trajectory_in_bounds(const SpriteVideoSpec& spec, int frames, int height, int width) {
    const double e = sprite_extent(spec.size_px);
    for (int f : {0, frames - 1}) {
        const double x = spec.start_x + f * spec.velocity_x;
        const double y = spec.start_y + f * spec.velocity_y;
        if (x - e < 1.0 || x + e > width - 1.0 || y - e < 1.0 || y + e > height - 1.0) return false;
    }
    return true;
}

namespace {

// 0 outside, 1 body, 2 orientation dot; (dx, dy) relative to the centroid.
int classify_point(Shape shape, double s, double dx, double dy, double hx, double hy) {
    bool inside = false;
    switch (shape) {
    case Shape::circle: inside = dx * dx + dy * dy <= 0.25 * s * s; break;
    case Shape::square: inside = std::abs(dx) <= 0.5 * s && std::abs(dy) <= 0.5 * s; break;
    case Shape::triangle:
        inside = dy <= s / 3.0 && dy >= -2.0 * s / 3.0 && std::abs(dx) <= 0.5 * (dy + 2.0 * s / 3.0);
        break;
    }
    if (!inside) return 0;
    const double ox = dx - 0.22 * s * hx, oy = dy - 0.22 * s * hy, r = 0.11 * s;
    return ox * ox + oy * oy <= r * r ? 2 : 1;
}

// Tent prefilter over a 2 x 2 pixel footprint, sampled on a kSub grid per
// pixel. Smoother edges keep sub-pixel shifts close to bilinear.
constexpr int kSub = 8;
constexpr int kTaps = 2 * kSub;

const std::array<double, kTaps>& tent_taps() {
    static const std::array<double, kTaps> taps = [] {
        std::array<double, kTaps> t{};
        double sum = 0.0;
        for (int i = 0; i < kTaps; ++i) {
            t[i] = 1.0 - std::abs((i + 0.5) / kSub - 1.0);
            sum += t[i];
        }
        for (double& x : t) x /= sum;
        return t;
    }();
    return taps;
}

// Calls emit(y, x, body_weight, dot_weight) for every pixel the sprite touches.
template <class Emit>
void splat(Shape shape, double s, double cx, double cy, double hx, double hy, bool with_dot,
           int height, int width, Emit emit) {
    const auto& tap = tent_taps();
    const double e = sprite_extent(s);
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - e)) - 2);
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(cx + e)) + 2);
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - e)) - 2);
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(cy + e)) + 2);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            double wb = 0.0, wd = 0.0;
            for (int sy = 0; sy < kTaps; ++sy)
                for (int sx = 0; sx < kTaps; ++sx) {
                    const double px = x - 0.5 + (sx + 0.5) / kSub;
                    const double py = y - 0.5 + (sy + 0.5) / kSub;
                    int k = classify_point(shape, s, px - cx, py - cy, hx, hy);
                    if (k == 0) continue;
                    if (!with_dot) k = 1;
                    (k == 1 ? wb : wd) += tap[sx] * tap[sy];
                }
            if (wb + wd > 0.0) emit(y, x, wb, wd);
        }
}

} // namespace

Tensor sprite_coverage(Shape shape, double size_px, double cx, double cy, int height, int width) {
    Tensor out({height, width}, 0.0);
    if (!(size_px > 0.0)) return out;
    splat(shape, size_px, cx, cy, 0.0, 0.0, false, height, width,
          [&](int y, int x, double wb, double) { out[static_cast<size_t>(y) * width + x] = wb; });
    return out;
}

VideoTensor render_video(const SpriteVideoSpec& spec, int frames, int height, int width,
                         double frame_rate) {
    if (frames < 1 || height < 1 || width < 1) throw ShapeError("render_video: empty canvas");
    if (!(spec.size_px > 0.0)) throw RangeError("render_video: sprite size must be positive");
    if (!trajectory_in_bounds(spec, frames, height, width)) {
        throw RangeError("render_video: trajectory leaves the canvas");
    }
    const double bg = background_level(spec.background_seed);
    VideoTensor v(frames, 3, height, width, bg, frame_rate);
    const auto body = color_rgb(spec.caption.color);
    std::array<double, 3> dot;
    for (int c = 0; c < 3; ++c) dot[c] = 0.45 * (body[c] + 1.0) - 1.0;

    double hx = spec.velocity_x, hy = spec.velocity_y;
    const double norm = std::hypot(hx, hy);
    if (norm > 0.0) {
        hx /= norm;
        hy /= norm;
    } else {
        const auto d = direction_vector(spec.caption.direction);
        hx = d[0];
        hy = d[1];
    }

    const double s = spec.size_px;
    for (int f = 0; f < frames; ++f) {
        const double cx = spec.start_x + f * spec.velocity_x;
        const double cy = spec.start_y + f * spec.velocity_y;
        splat(spec.caption.shape, s, cx, cy, hx, hy, true, height, width,
              [&](int y, int x, double wb, double wd) {
                  for (int c = 0; c < 3; ++c)
                      v.at(f, c, y, x) = (1.0 - wb - wd) * bg + wb * body[c] + wd * dot[c];
              });
    }
    return v;
}

CaptionSpec sample_caption(Rng& rng, bool has_motion_words) {
    CaptionSpec c;
    c.shape = static_cast<Shape>(rng() % kNumShapes);
    c.color = static_cast<Color>(rng() % kNumColors);
    c.direction = static_cast<Direction>(rng() % kNumDirections);
    c.speed = static_cast<Speed>(rng() % kNumSpeeds);
    c.has_motion_words = has_motion_words;
    return c;
}

SpriteVideoSpec sample_sprite_spec(const CaptionSpec& caption, int frames, int height, int width,
                                   Rng& rng) {
    SpriteVideoSpec s;
    s.caption = caption;
    const int side = std::min(height, width);
    s.size_px = side * (0.22 + 0.08 * uniform01(rng));
    const double speed = speed_px_per_frame(caption.speed, s.size_px, frames, side);
    const auto d = direction_vector(caption.direction);
    s.velocity_x = speed * d[0];
    s.velocity_y = speed * d[1];
    const double e = sprite_extent(s.size_px);
    auto place = [&](double v, int extent) {
        const double span = (frames - 1) * v;
        const double lo = 1.0 + e - std::min(0.0, span);
        const double hi = extent - 1.0 - e - std::max(0.0, span);
        if (hi < lo) throw RangeError("sample_sprite_spec: canvas too small for the trajectory");
        return lo + (hi - lo) * uniform01(rng);
    };
    s.start_x = place(s.velocity_x, width);
    s.start_y = place(s.velocity_y, height);
    s.background_seed = rng();
    return s;
}

SpriteDetection detect_sprite(const VideoTensor& video, int frame) {
    if (video.channels() != 3) throw ShapeError("detect_sprite expects RGB frames");
    const int H = video.height(), W = video.width();
    SpriteDetection d;
    d.weight = Tensor({H, W}, 0.0);
    d.mask = Tensor({H, W}, 0.0);
    double sx = 0.0, sy = 0.0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double r = video.at(frame, 0, y, x), g = video.at(frame, 1, y, x),
                         b = video.at(frame, 2, y, x);
            const double sat = std::max({r, g, b}) - std::min({r, g, b});
            const double w = std::clamp(sat / 2.0, 0.0, 1.0);
            d.weight[static_cast<size_t>(y) * W + x] = w;
            if (w <= kMaskThreshold) continue;
            d.mask[static_cast<size_t>(y) * W + x] = 1.0;
            d.area += 1.0;
            d.weight_sum += w;
            sx += w * (x + 0.5);
            sy += w * (y + 0.5);
            d.mean_rgb[0] += w * r;
            d.mean_rgb[1] += w * g;
            d.mean_rgb[2] += w * b;
        }
    if (d.weight_sum > 0.0) {
        d.cx = sx / d.weight_sum;
        d.cy = sy / d.weight_sum;
        for (double& c : d.mean_rgb) c /= d.weight_sum;
    }
    return d;
}

Tensor depth_proxy(const VideoTensor& video, int frame) {
    const SpriteDetection d = detect_sprite(video, frame);
    Tensor out = d.mask;
    const double depth = std::sqrt(d.area) / video.width();
    for (double& v : out.values()) v *= depth;
    return out;
}

Tensor sketch_proxy(const VideoTensor& video, int frame) {
    const int C = video.channels(), H = video.height(), W = video.width();
    Tensor out({H, W}, 0.0);
    auto px = [&](int c, int y, int x) {
        return video.at(frame, c, std::clamp(y, 0, H - 1), std::clamp(x, 0, W - 1));
    };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int c = 0; c < C; ++c) {
                const double gx = (px(c, y - 1, x + 1) + 2 * px(c, y, x + 1) + px(c, y + 1, x + 1)) -
                                  (px(c, y - 1, x - 1) + 2 * px(c, y, x - 1) + px(c, y + 1, x - 1));
                const double gy = (px(c, y + 1, x - 1) + 2 * px(c, y + 1, x) + px(c, y + 1, x + 1)) -
                                  (px(c, y - 1, x - 1) + 2 * px(c, y - 1, x) + px(c, y - 1, x + 1));
                acc += gx * gx + gy * gy;
            }
            if (std::sqrt(acc / C) > kSketchThreshold) out[static_cast<size_t>(y) * W + x] = 1.0;
        }
    return out;
}

namespace {

Tensor stack_single_channel(const VideoTensor& video, Tensor (*fn)(const VideoTensor&, int)) {
    const int F = video.frames(), H = video.height(), W = video.width();
    Tensor out({F, 1, H, W});
    for (int f = 0; f < F; ++f) {
        const Tensor m = fn(video, f);
        std::copy(m.values().begin(), m.values().end(),
                  out.values().begin() + static_cast<std::ptrdiff_t>(f) * H * W);
    }
    return out;
}

} // namespace

Tensor depth_maps(const VideoTensor& video) { return stack_single_channel(video, depth_proxy); }
Tensor sketch_maps(const VideoTensor& video) { return stack_single_channel(video, sketch_proxy); }

Tensor motion_vector_maps(const SpriteVideoSpec& spec, int frames, int height, int width) {
    const VideoTensor v = render_video(spec, frames, height, width);
    Tensor out({frames, 2, height, width}, 0.0);
    const size_t P = static_cast<size_t>(height) * width;
    for (int f = 0; f < frames; ++f) {
        const SpriteDetection d = detect_sprite(v, f);
        for (size_t p = 0; p < P; ++p) {
            if (d.mask[p] == 0.0) continue;
            out[(static_cast<size_t>(f) * 2) * P + p] = spec.velocity_x;
            out[(static_cast<size_t>(f) * 2 + 1) * P + p] = spec.velocity_y;
        }
    }
    return out;
}

StructuralMaps make_structural_maps(const Tensor& depth, const Tensor& sketch,
                                    const Tensor& motion, bool use_depth, bool use_sketch,
                                    bool use_motion) {
    if (depth.rank() != 4 || depth.dim(1) != 1) throw ShapeError("depth maps must be (F, 1, H, W)");
    const int F = depth.dim(0), H = depth.dim(2), W = depth.dim(3);
    if (sketch.shape() != depth.shape()) throw ShapeError("sketch maps must match depth maps");
    if (motion.shape() != std::vector<int>{F, 2, H, W}) throw ShapeError("motion maps must be (F, 2, H, W)");
    StructuralMaps m;
    m.maps = Tensor({F, kStructuralChannels, H, W}, 0.0);
    m.has_depth = use_depth;
    m.has_sketch = use_sketch;
    m.has_motion = use_motion;
    const size_t P = static_cast<size_t>(H) * W;
    for (int f = 0; f < F; ++f) {
        double* dst = m.maps.data() + static_cast<size_t>(f) * kStructuralChannels * P;
        if (use_depth) std::copy_n(depth.data() + f * P, P, dst + kDepthChannel * P);
        if (use_sketch) std::copy_n(sketch.data() + f * P, P, dst + kSketchChannel * P);
        if (use_motion) std::copy_n(motion.data() + f * 2 * P, 2 * P, dst + kMotionXChannel * P);
    }
    return m;
}

StructuralMaps structural_maps_for(const SpriteVideoSpec& spec, const VideoTensor& video,
                                   bool use_depth, bool use_sketch, bool use_motion) {
    const int F = video.frames(), H = video.height(), W = video.width();
    const Tensor zero1({F, 1, H, W}, 0.0);
    return make_structural_maps(use_depth ? depth_maps(video) : zero1,
                                use_sketch ? sketch_maps(video) : zero1,
                                use_motion ? motion_vector_maps(spec, F, H, W)
                                           : Tensor({F, 2, H, W}, 0.0),
                                use_depth, use_sketch, use_motion);
}

const char* to_string(CorpusKind k) {
    switch (k) {
    case CorpusKind::image_text: return "image_text";
    case CorpusKind::text_free_video: return "text_free_video";
    case CorpusKind::video_text: return "video_text";
    }
    return "?";
}

CorpusKind parse_corpus_kind(const std::string& s) {
    if (s == "image_text") return CorpusKind::image_text;
    if (s == "text_free_video") return CorpusKind::text_free_video;
    if (s == "video_text") return CorpusKind::video_text;
    throw ConfigError("unknown corpus kind '" + s + "'");
}

VideoTensor Corpus::render(size_t i) const {
    return render_video(items.at(i).spec, dims.frames, dims.height, dims.width, dims.frame_rate);
}

std::optional<CaptionSpec> Corpus::training_caption(size_t i) const {
    const CorpusItem& it = items.at(i);
    if (!it.caption_available) return std::nullopt;
    return it.spec.caption;
}

Corpus make_corpus(CorpusKind kind, size_t n, std::uint64_t seed, CorpusDims dims) {
    if (n == 0) throw RangeError("corpus must contain at least one item");
    if (dims.channels != 3) throw ConfigError("corpus.channels: sprites are rendered in RGB");
    if (kind == CorpusKind::image_text) dims.frames = 1;
    if (dims.frames < 1) throw ConfigError("corpus.frames must be positive");
    Corpus c;
    c.kind = kind;
    c.seed = seed;
    c.dims = dims;
    c.items.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        Rng rng = make_rng(seed, 0xc0 + static_cast<std::uint64_t>(kind), i);
        CorpusItem item;
        item.spec = sample_sprite_spec(sample_caption(rng), dims.frames, dims.height, dims.width, rng);
        item.caption_available = kind != CorpusKind::text_free_video;
        c.items.push_back(item);
    }
    return c;
}

Corpus make_image_text_pairs(size_t n, std::uint64_t seed, CorpusDims dims) {
    return make_corpus(CorpusKind::image_text, n, seed, dims);
}
Corpus make_text_free_videos(size_t n, std::uint64_t seed, CorpusDims dims) {
    return make_corpus(CorpusKind::text_free_video, n, seed, dims);
}
Corpus make_video_text_pairs(size_t n, std::uint64_t seed, CorpusDims dims) {
    return make_corpus(CorpusKind::video_text, n, seed, dims);
}

namespace {

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string read_bytes(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IntegrityError("missing file: " + path.string());
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

void write_bytes_atomic(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IntegrityError("cannot write " + tmp.string());
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw IntegrityError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string encode_vid(const VideoTensor& v, StoredType type) {
    std::string out = "TFVID 1 " + std::to_string(v.frames()) + " " + std::to_string(v.channels()) +
                      " " + std::to_string(v.height()) + " " + std::to_string(v.width()) + " " +
                      (type == StoredType::float32 ? "float32" : "float64") +
                      " fps=" + format_double(v.frame_rate()) + "\n";
    const size_t header = out.size();
    if (type == StoredType::float32) {
        out.resize(header + v.size() * sizeof(float));
        for (size_t i = 0; i < v.size(); ++i) {
            const float f = static_cast<float>(v[i]);
            std::memcpy(out.data() + header + i * sizeof(float), &f, sizeof(float));
        }
    } else {
        out.resize(header + v.size() * sizeof(double));
        std::memcpy(out.data() + header, v.tensor().data(), v.size() * sizeof(double));
    }
    return out;
}

VideoTensor decode_vid(const std::string& bytes, const std::string& what) {
    const auto nl = bytes.find('\n');
    if (nl == std::string::npos || nl > 256) throw IntegrityError(what + ": missing TFVID header");
    std::istringstream hs(bytes.substr(0, nl));
    std::string magic, dtype, fps;
    int version = 0, F = 0, C = 0, H = 0, W = 0;
    hs >> magic >> version >> F >> C >> H >> W >> dtype >> fps;
    if (!hs || magic != "TFVID") throw IntegrityError(what + ": malformed TFVID header");
    if (version != 1) throw IntegrityError(what + ": unsupported TFVID version");
    if (F < 1 || C < 1 || H < 1 || W < 1) throw IntegrityError(what + ": bad dimensions");
    if (fps.rfind("fps=", 0) != 0) throw IntegrityError(what + ": missing fps");
    double rate = 0.0;
    {
        const char* b = fps.data() + 4;
        auto res = std::from_chars(b, fps.data() + fps.size(), rate);
        if (res.ec != std::errc()) throw IntegrityError(what + ": bad fps");
    }
    VideoTensor v(F, C, H, W, 0.0, rate);
    const size_t n = v.size();
    const char* data = bytes.data() + nl + 1;
    const size_t avail = bytes.size() - nl - 1;
    if (dtype == "float32") {
        if (avail != n * sizeof(float)) throw IntegrityError(what + ": payload size mismatch");
        for (size_t i = 0; i < n; ++i) {
            float f;
            std::memcpy(&f, data + i * sizeof(float), sizeof(float));
            v[i] = f;
        }
    } else if (dtype == "float64") {
        if (avail != n * sizeof(double)) throw IntegrityError(what + ": payload size mismatch");
        std::memcpy(v.tensor().data(), data, n * sizeof(double));
    } else {
        throw IntegrityError(what + ": unknown dtype " + dtype);
    }
    return v;
}

std::string item_name(size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%05zu", i);
    return buf;
}

std::uint64_t parse_hex(const std::string& s) {
    std::uint64_t v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v, 16);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw IntegrityError("malformed checksum '" + s + "'");
    }
    return v;
}

} // namespace

void write_vid(const std::filesystem::path& path, const VideoTensor& v, StoredType type) {
    write_bytes_atomic(path, encode_vid(v, type));
}

VideoTensor read_vid(const std::filesystem::path& path) {
    return decode_vid(read_bytes(path), path.string());
}

VideoTensor round_to_float32(const VideoTensor& v) {
    VideoTensor out = v;
    for (double& x : out.values()) x = static_cast<float>(x);
    return out;
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
    const std::string b = read_bytes(path);
    return fnv1a64(b.data(), b.size());
}

std::string checksum_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void write_corpus(const std::filesystem::path& dir, const Corpus& corpus, bool with_conditions) {
    std::filesystem::create_directories(dir / "items");
    if (with_conditions) std::filesystem::create_directories(dir / "conds");
    const CorpusDims& d = corpus.dims;
    std::string manifest;
    nlohmann::json header = {{"format", "tfv-corpus"},
                             {"version", kManifestVersion},
                             {"kind", to_string(corpus.kind)},
                             {"seed", corpus.seed},
                             {"count", corpus.size()},
                             {"frames", d.frames},
                             {"channels", d.channels},
                             {"height", d.height},
                             {"width", d.width},
                             {"frame_rate", d.frame_rate},
                             {"conditions", with_conditions}};
    manifest += header.dump() + "\n";
    for (size_t i = 0; i < corpus.size(); ++i) {
        const CorpusItem& item = corpus.items[i];
        const VideoTensor v = corpus.render(i);
        const std::string rel = "items/" + item_name(i) + ".vid";
        const std::string bytes = encode_vid(v, StoredType::float32);
        write_bytes_atomic(dir / rel, bytes);
        nlohmann::json rec = {{"index", i},
                              {"file", rel},
                              {"checksum", checksum_hex(fnv1a64(bytes.data(), bytes.size()))},
                              {"spec", to_json(item.spec)},
                              {"caption", to_record(item.spec.caption)},
                              {"caption_available", item.caption_available}};
        if (with_conditions) {
            const int F = d.frames, H = d.height, W = d.width;
            const std::pair<const char*, Tensor> maps[] = {
                {"depth", depth_maps(v)},
                {"sketch", sketch_maps(v)},
                {"mv", motion_vector_maps(item.spec, F, H, W)}};
            for (const auto& [ext, t] : maps) {
                const std::string crel = "conds/" + item_name(i) + "." + ext;
                const std::string cb = encode_vid(VideoTensor(t, d.frame_rate), StoredType::float32);
                write_bytes_atomic(dir / crel, cb);
                rec["conds"][ext] = {{"file", crel},
                                     {"checksum", checksum_hex(fnv1a64(cb.data(), cb.size()))}};
            }
        }
        manifest += rec.dump() + "\n";
    }
    manifest += nlohmann::json{{"manifest_checksum",
                                checksum_hex(fnv1a64(manifest.data(), manifest.size()))}}
                    .dump() +
                "\n";
    write_bytes_atomic(dir / "manifest", manifest);
}

Corpus read_corpus(const std::filesystem::path& dir) {
    const std::string text = read_bytes(dir / "manifest");
    std::vector<std::string> lines;
    std::vector<size_t> offsets;
    size_t pos = 0;
    while (pos < text.size()) {
        const size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) throw IntegrityError("manifest: unterminated final line");
        offsets.push_back(pos);
        lines.push_back(text.substr(pos, nl - pos));
        pos = nl + 1;
    }
    if (lines.size() < 3) throw IntegrityError("manifest: too few records");
    nlohmann::json trailer, header;
    try {
        trailer = nlohmann::json::parse(lines.back());
        header = nlohmann::json::parse(lines.front());
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("manifest: ") + e.what());
    }
    if (!trailer.contains("manifest_checksum")) throw IntegrityError("manifest: missing trailer");
    const std::uint64_t want = parse_hex(trailer["manifest_checksum"].get<std::string>());
    if (fnv1a64(text.data(), offsets.back()) != want) {
        throw IntegrityError("manifest: checksum mismatch");
    }
    if (header.value("format", "") != "tfv-corpus") throw IntegrityError("manifest: wrong format");
    if (header.value("version", -1) != kManifestVersion) {
        throw IntegrityError("manifest: unsupported version");
    }
    Corpus c;
    c.kind = parse_corpus_kind(header.at("kind").get<std::string>());
    c.seed = header.at("seed").get<std::uint64_t>();
    c.dims.frames = header.at("frames").get<int>();
    c.dims.channels = header.at("channels").get<int>();
    c.dims.height = header.at("height").get<int>();
    c.dims.width = header.at("width").get<int>();
    c.dims.frame_rate = header.at("frame_rate").get<double>();
    const size_t count = header.at("count").get<size_t>();
    if (lines.size() != count + 2) throw IntegrityError("manifest: item count mismatch");
    auto verify = [&](const nlohmann::json& ref) {
        const std::filesystem::path p = dir / ref.at("file").get<std::string>();
        if (!std::filesystem::exists(p)) throw IntegrityError("missing file: " + p.string());
        if (file_checksum(p) != parse_hex(ref.at("checksum").get<std::string>())) {
            throw IntegrityError("checksum mismatch: " + p.string());
        }
    };
    for (size_t i = 0; i < count; ++i) {
        const nlohmann::json rec = nlohmann::json::parse(lines[i + 1]);
        if (rec.at("index").get<size_t>() != i) throw IntegrityError("manifest: items out of order");
        verify(rec);
        if (rec.contains("conds"))
            for (const auto& [_, ref] : rec["conds"].items()) verify(ref);
        CorpusItem item;
        item.spec = sprite_spec_from_json(rec.at("spec"));
        item.caption_available = rec.at("caption_available").get<bool>();
        c.items.push_back(item);
    }
    return c;
}

VideoTensor load_item(const std::filesystem::path& dir, size_t index) {
    return read_vid(dir / ("items/" + item_name(index) + ".vid"));
}

} // namespace tfv
