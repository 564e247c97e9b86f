#include "tfv/denoiser.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "tfv/conditioning.hpp"
#include "tfv/random.hpp"

namespace tfv {

static_assert(std::endian::native == std::endian::little,
              "checkpoint and tensor files assume a little-endian host");

void DenoiserConfig::validate(int height, int width) const {
    if (video_channels < 1) throw ConfigError("model.video_channels must be positive");
    if (in_channels != video_channels && in_channels != video_channels + kStructuralChannels) {
        throw ConfigError("model.in_channels must equal video_channels or video_channels + 4");
    }
    if (base_width < 1) throw ConfigError("model.base_width must be positive");
    if (depth < 1) throw ConfigError("model.depth must be at least 1");
    if (embed_dim < 1) throw ConfigError("model.embed_dim must be positive");
    const int div = 1 << depth;
    if ((height > 0 && height % div) || (width > 0 && width % div)) {
        throw ConfigError("model.depth: height and width must be divisible by 2^depth");
    }
}

nlohmann::json to_json(const DenoiserConfig& c) {
    return {{"video_channels", c.video_channels}, {"in_channels", c.in_channels},
            {"base_width", c.base_width},         {"depth", c.depth},
            {"embed_dim", c.embed_dim},           {"temporal_enabled", c.temporal_enabled}};
}

DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
    DenoiserConfig c;
    c.video_channels = j.value("video_channels", c.video_channels);
    c.in_channels = j.value("in_channels", c.in_channels);
    c.base_width = j.value("base_width", c.base_width);
    c.depth = j.value("depth", c.depth);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.temporal_enabled = j.value("temporal_enabled", c.temporal_enabled);
    c.validate();
    return c;
}

size_t DenoiserParams::count() const {
    size_t n = 0;
    for (const auto& [_, t] : tensors) n += t.size();
    return n;
}

bool is_temporal_param(const std::string& name) {
    return name.find(".temporal.") != std::string::npos;
}

const char* to_string(Branch b) {
    switch (b) {
    case Branch::content: return "content";
    case Branch::motion: return "motion";
    case Branch::paired: return "paired";
    }
    return "?";
}

namespace {

struct Initializer {
    ParamStore& store;
    Rng& rng;

    void normal(const std::string& name, std::vector<int> shape, int fan_in) {
        Tensor t(std::move(shape));
        std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
        for (double& v : t.values()) v = n(rng);
        store[name] = std::move(t);
    }
    void zeros(const std::string& name, std::vector<int> shape) {
        store[name] = Tensor(std::move(shape), 0.0);
    }
    void conv(const std::string& name, int cin, int cout, int k) {
        normal(name + ".w", {cout, cin, k, k}, cin * k * k);
        zeros(name + ".b", {cout});
    }
    void linear(const std::string& name, int in, int out) {
        normal(name + ".w", {out, in}, in);
        zeros(name + ".b", {out});
    }
    void res_block(const std::string& name, int cin, int cout, int embed) {
        conv(name + ".conv1", cin, cout, 3);
        linear(name + ".emb", embed, cout);
        conv(name + ".conv2", cout, cout, 3);
        if (cin != cout) conv(name + ".skip", cin, cout, 1);
    }
    void temporal_conv_block(const std::string& name, int c) {
        normal(name + ".conv.w", {c, c, 3}, c * 3);
        zeros(name + ".conv.b", {c});
        zeros(name + ".out.w", {c, c, 1, 1});
        zeros(name + ".out.b", {c});
    }
    void attention_block(const std::string& name, int c) {
        conv(name + ".q", c, c, 1);
        conv(name + ".k", c, c, 1);
        conv(name + ".v", c, c, 1);
        zeros(name + ".out.w", {c, c, 1, 1});
        zeros(name + ".out.b", {c});
    }
};

size_t conv_count(size_t cin, size_t cout, size_t k) { return cout * cin * k * k + cout; }

} // namespace

DenoiserParams init_denoiser(const DenoiserConfig& config, std::uint64_t seed) {
    config.validate();
    DenoiserParams p;
    p.config = config;
    p.init_seed = seed;
    Rng rng = make_rng(seed, 0xde7015e);
    Initializer init{p.tensors, rng};
    const int D = config.embed_dim;
    const int w = config.base_width;

    init.linear("time.fc1", D, D);
    init.linear("time.fc2", D, D);
    init.linear("text.proj", D, D);
    init.normal("null.text", {D}, D);
    init.normal("null.image", {D}, D);
    init_image_encoder(p.tensors, {config.video_channels, w, D}, rng);

    init.conv("in.conv", config.in_channels, w, 3);
    int c = w;
    for (int i = 0; i < config.depth; ++i) {
        const std::string blk = "down" + std::to_string(i);
        init.res_block(blk + ".res", c, config.level_channels(i), D);
        c = config.level_channels(i);
        if (config.temporal_enabled) init.temporal_conv_block(blk + ".temporal", c);
    }
    init.res_block("mid.res", c, config.level_channels(config.depth), D);
    c = config.level_channels(config.depth);
    if (config.temporal_enabled) init.attention_block("mid.temporal", c);
    for (int i = config.depth - 1; i >= 0; --i) {
        const std::string blk = "up" + std::to_string(i);
        init.res_block(blk + ".res", c + config.level_channels(i), config.level_channels(i), D);
        c = config.level_channels(i);
        if (config.temporal_enabled) init.temporal_conv_block(blk + ".temporal", c);
    }
    init.conv("out.conv", w, config.video_channels, 3);
    return p;
}

size_t denoiser_param_count(const DenoiserConfig& config) {
    const size_t D = config.embed_dim, w = config.base_width;
    auto res = [&](size_t cin, size_t cout) {
        size_t n = conv_count(cin, cout, 3) + (D * cout + cout) + conv_count(cout, cout, 3);
        if (cin != cout) n += conv_count(cin, cout, 1);
        return n;
    };
    auto tconv = [](size_t ch) { return ch * ch * 3 + ch + ch * ch + ch; };
    auto attn = [](size_t ch) { return 4 * (ch * ch + ch); };
    size_t n = 3 * (D * D + D) + 2 * D;
    n += image_encoder_param_count({config.video_channels, config.base_width, config.embed_dim});
    n += conv_count(config.in_channels, w, 3);
    size_t c = w;
    for (int i = 0; i < config.depth; ++i) {
        const size_t out = config.level_channels(i);
        n += res(c, out) + (config.temporal_enabled ? tconv(out) : 0);
        c = out;
    }
    const size_t mid = config.level_channels(config.depth);
    n += res(c, mid) + (config.temporal_enabled ? attn(mid) : 0);
    c = mid;
    for (int i = config.depth - 1; i >= 0; --i) {
        const size_t out = config.level_channels(i);
        n += res(c + out, out) + (config.temporal_enabled ? tconv(out) : 0);
        c = out;
    }
    n += conv_count(w, config.video_channels, 3);
    return n;
}

std::vector<double> timestep_features(int t, int dim) {
    std::vector<double> out(dim, 0.0);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
        out[i] = std::cos(t * freq);
        out[half + i] = std::sin(t * freq);
    }
    return out;
}

namespace {

struct Builder {
    ad::Graph& g;
    const DenoiserParams& p;

    ad::Var param(const std::string& name) { return g.param(name, p.tensors.at(name)); }
    ad::Var conv(ad::Var x, const std::string& name) {
        return ad::conv2d(g, x, param(name + ".w"), param(name + ".b"));
    }
    ad::Var res_block(ad::Var x, ad::Var cond_act, const std::string& name) {
        ad::Var h = conv(ad::silu(g, x), name + ".conv1");
        ad::Var e = ad::linear(g, cond_act, param(name + ".emb.w"), param(name + ".emb.b"));
        h = ad::add_channel_bias(g, h, e);
        h = conv(ad::silu(g, h), name + ".conv2");
        ad::Var skip = p.tensors.count(name + ".skip.w") ? conv(x, name + ".skip") : x;
        return ad::add(g, skip, h);
    }
    ad::Var temporal_conv_block(ad::Var x, const std::string& name) {
        ad::Var h =
            ad::temporal_conv(g, x, param(name + ".conv.w"), param(name + ".conv.b"));
        h = conv(ad::silu(g, h), name + ".out");
        return ad::add(g, x, h);
    }
    ad::Var attention_block(ad::Var x, const std::string& name) {
        ad::Var a = ad::temporal_attention(g, conv(x, name + ".q"), conv(x, name + ".k"),
                                           conv(x, name + ".v"));
        return ad::add(g, x, conv(a, name + ".out"));
    }
};

void check_embedding(const std::vector<double>& e, int dim, const char* what) {
    if (static_cast<int>(e.size()) != dim) {
        throw ShapeError(std::string(what) + " embedding width " + std::to_string(e.size()) +
                         " != embed_dim " + std::to_string(dim));
    }
}

} // namespace

ad::Var denoiser_graph(ad::Graph& g, const DenoiserParams& params, ad::Var x_t, int t,
                       const GraphConditions& cond) {
    const DenoiserConfig& cfg = params.config;
    const Tensor& xv = g.value(x_t);
    if (xv.rank() != 4 || xv.dim(1) != cfg.video_channels) {
        throw ShapeError("denoiser input must be (F, " + std::to_string(cfg.video_channels) +
                         ", H, W), got " + shape_string(xv.shape()));
    }
    const int F = xv.dim(0), H = xv.dim(2), W = xv.dim(3);
    if (t < 0) throw RangeError("denoiser: negative timestep");
    if ((H % (1 << cfg.depth)) || (W % (1 << cfg.depth))) {
        throw ShapeError("denoiser: H and W must be divisible by 2^depth");
    }
    const int D = cfg.embed_dim;
    Builder b{g, params};

    ad::Var temb = g.constant(Tensor({D}, timestep_features(t, D)));
    temb = ad::linear(g, temb, b.param("time.fc1.w"), b.param("time.fc1.b"));
    temb = ad::linear(g, ad::silu(g, temb), b.param("time.fc2.w"), b.param("time.fc2.b"));

    ad::Var text = b.param("null.text");
    if (cond.text) {
        check_embedding(*cond.text, D, "text");
        text = g.constant(Tensor({D}, *cond.text));
    }
    text = ad::linear(g, text, b.param("text.proj.w"), b.param("text.proj.b"));

    ad::Var image = b.param("null.image");
    if (cond.image_var) {
        if (g.value(*cond.image_var).size() != static_cast<size_t>(D)) {
            throw ShapeError("image embedding width != embed_dim");
        }
        image = *cond.image_var;
    } else if (cond.image) {
        check_embedding(*cond.image, D, "image");
        image = g.constant(Tensor({D}, *cond.image));
    }
    ad::Var c = ad::add(g, ad::add(g, temb, text), image);
    ad::Var c_act = ad::silu(g, c);

    ad::Var x = x_t;
    if (cfg.structural()) {
        Tensor maps({F, kStructuralChannels, H, W}, 0.0);
        if (cond.structural) {
            if (cond.structural->maps.shape() != maps.shape()) {
                throw ShapeError("structural maps must be " + shape_string(maps.shape()) +
                                 ", got " + shape_string(cond.structural->maps.shape()));
            }
            maps = cond.structural->maps;
        }
        x = ad::concat_channels(g, x, g.constant(std::move(maps)));
    } else if (cond.structural && cond.structural->any()) {
        throw ShapeError("structural maps supplied to a model without condition channels");
    }

    const bool temporal = cfg.temporal_enabled && F > 1;
    ad::Var h = b.conv(x, "in.conv");
    std::vector<ad::Var> skips;
    for (int i = 0; i < cfg.depth; ++i) {
        const std::string blk = "down" + std::to_string(i);
        h = b.res_block(h, c_act, blk + ".res");
        if (temporal) h = b.temporal_conv_block(h, blk + ".temporal");
        skips.push_back(h);
        h = ad::avg_pool2(g, h);
    }
    h = b.res_block(h, c_act, "mid.res");
    if (temporal) h = b.attention_block(h, "mid.temporal");
    for (int i = cfg.depth - 1; i >= 0; --i) {
        const std::string blk = "up" + std::to_string(i);
        h = ad::concat_channels(g, ad::upsample2(g, h), skips[i]);
        h = b.res_block(h, c_act, blk + ".res");
        if (temporal) h = b.temporal_conv_block(h, blk + ".temporal");
    }
    return b.conv(ad::silu(g, h), "out.conv");
}

VideoTensor denoise(const DenoiserParams& params, const VideoTensor& x_t, int t,
                    const ConditionBundle& cond) {
    ad::Graph g(false);
    GraphConditions gc;
    gc.text = cond.text_embedding;
    gc.image = cond.image_embedding;
    if (cond.structural) gc.structural = &*cond.structural;
    ad::Var v = denoiser_graph(g, params, g.constant(x_t.tensor()), t, gc);
    return VideoTensor(g.value(v), x_t.frame_rate());
}

DenoiseFn make_denoise_fn(const DenoiserParams& params) {
    return [&params](const VideoTensor& x, int t, const ConditionBundle& cond) {
        return denoise(params, x, t, cond);
    };
}

LossAndGrad forward_with_loss(const DenoiserParams& params, const BatchItem& item,
                              const NoiseSchedule& sched, double lam, CoherenceSpace space,
                              double weight) {
    if (lam < 0.0) throw RangeError("forward_with_loss: lam must be non-negative");
    const VideoTensor x_t = q_sample(item.x0, item.t, item.noise, sched);
    const VideoTensor v_target = v_from_x0_eps(item.x0, item.noise, item.t, sched);

    ad::Graph g(true);
    GraphConditions gc;
    gc.text = item.text_embedding;
    if (item.image_source) gc.image_var = image_encoder_graph(g, params.tensors, *item.image_source);
    if (item.structural) gc.structural = &*item.structural;
    ad::Var v = denoiser_graph(g, params, g.constant(x_t.tensor()), item.t, gc);

    ad::Var base = ad::mse(g, v, v_target.tensor());
    ad::Var coh = ad::frame_difference_mse(g, v, v_target.tensor());
    // x0_hat - x0 = -sqrt(1 - abar) (v_pred - v), so data-space differences
    // are velocity-space differences scaled by (1 - abar).
    if (space == CoherenceSpace::data) coh = ad::scale(g, coh, 1.0 - sched.alpha_bars[item.t]);
    ad::Var total = ad::add(g, base, ad::scale(g, coh, lam));

    LossAndGrad out;
    out.loss.base = g.value(base)[0];
    out.loss.coherence = g.value(coh)[0];
    out.loss.total = total_loss(out.loss.base, out.loss.coherence, lam);
    g.backward(total, weight);
    const auto& bound = g.params();
    for (const auto& [name, tensor] : params.tensors) {
        auto it = bound.find(name);
        out.grads[name] = it == bound.end() ? Tensor(tensor.shape(), 0.0) : g.grad(it->second);
    }
    return out;
}

std::uint64_t fnv1a64(const void* data, size_t n, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

constexpr char kCheckpointMagic[8] = {'T', 'F', 'V', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void put(std::string& buf, T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    buf.append(b, sizeof(T));
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n) {
        if (pos + n > buf.size()) throw IntegrityError("checkpoint truncated");
    }
    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, buf.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

} // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::string buf(kCheckpointMagic, sizeof(kCheckpointMagic));
    put<std::uint32_t>(buf, kCheckpointVersion);
    const std::string meta = ckpt.meta.dump();
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(meta.size()));
    buf += meta;
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(ckpt.arrays.size()));
    for (const auto& [name, t] : ckpt.arrays) {
        put<std::uint16_t>(buf, static_cast<std::uint16_t>(name.size()));
        buf += name;
        put<std::uint8_t>(buf, 1);
        put<std::uint8_t>(buf, static_cast<std::uint8_t>(t.rank()));
        for (int d : t.shape()) put<std::uint32_t>(buf, static_cast<std::uint32_t>(d));
        buf.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
    }
    put<std::uint64_t>(buf, fnv1a64(buf.data(), buf.size()));

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IntegrityError("cannot write " + tmp.string());
        os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!os) throw IntegrityError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IntegrityError("checkpoint not found: " + path.string());
    std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (buf.size() < sizeof(kCheckpointMagic) + 8 ||
        std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
        throw IntegrityError("not a checkpoint: " + path.string());
    }
    std::uint64_t stored;
    std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
    if (fnv1a64(buf.data(), buf.size() - 8) != stored) {
        throw IntegrityError("checkpoint checksum mismatch: " + path.string());
    }
    const std::string body = buf.substr(0, buf.size() - 8);
    Reader r{body, sizeof(kCheckpointMagic)};
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw IntegrityError("unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ckpt;
    ckpt.meta = nlohmann::json::parse(r.bytes(r.get<std::uint32_t>()));
    const auto n = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
        std::string name = r.bytes(r.get<std::uint16_t>());
        if (r.get<std::uint8_t>() != 1) throw IntegrityError("unsupported dtype in " + name);
        const int rank = r.get<std::uint8_t>();
        std::vector<int> shape(rank);
        for (int& d : shape) d = static_cast<int>(r.get<std::uint32_t>());
        Tensor t(shape);
        const size_t bytes = t.size() * sizeof(double);
        r.need(bytes);
        std::memcpy(t.data(), body.data() + r.pos, bytes);
        r.pos += bytes;
        ckpt.arrays.emplace(std::move(name), std::move(t));
    }
    if (r.pos != body.size()) throw IntegrityError("trailing bytes in checkpoint");
    return ckpt;
}

Checkpoint make_checkpoint(const DenoiserParams& params, std::int64_t step) {
    Checkpoint c;
    c.meta["model"] = to_json(params.config);
    c.meta["init_seed"] = params.init_seed;
    c.meta["step"] = step;
    for (const auto& [name, t] : params.tensors) c.arrays["param/" + name] = t;
    return c;
}

DenoiserParams params_from_checkpoint(const Checkpoint& ckpt) {
    DenoiserParams p;
    p.config = denoiser_config_from_json(ckpt.meta.at("model"));
    p.init_seed = ckpt.meta.at("init_seed").get<std::uint64_t>();
    const std::string prefix = "param/";
    for (const auto& [name, t] : ckpt.arrays)
        if (name.rfind(prefix, 0) == 0) p.tensors[name.substr(prefix.size())] = t;
    const DenoiserParams fresh = init_denoiser(p.config, p.init_seed);
    for (const auto& [name, t] : fresh.tensors) {
        auto it = p.tensors.find(name);
        if (it == p.tensors.end() || it->second.shape() != t.shape()) {
            throw IntegrityError("checkpoint parameter missing or misshapen: " + name);
        }
    }
    if (p.tensors.size() != fresh.tensors.size()) {
        throw IntegrityError("checkpoint carries unexpected parameters");
    }
    return p;
}

} // namespace tfv
