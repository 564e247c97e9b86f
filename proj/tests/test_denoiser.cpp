#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "tfv/conditioning.hpp"
#include "tfv/denoiser.hpp"
#include "tfv/random.hpp"

using namespace tfv;

namespace {

DenoiserConfig tiny_config(bool temporal = true, bool structural = false) {
    DenoiserConfig c;
    c.video_channels = 3;
    c.in_channels = structural ? 7 : 3;
    c.base_width = 4;
    c.depth = 1;
    c.embed_dim = 8;
    c.temporal_enabled = temporal;
    return c;
}

VideoTensor random_video(int F, int C, int H, int W, std::uint64_t seed) {
    VideoTensor v(F, C, H, W);
    Rng rng = make_rng(seed, 3);
    fill_normal(v.values(), rng);
    return v;
}

// Overwrites every parameter (including zero-initialized ones) with noise so
// that no gradient path is trivially dead.
void randomize(DenoiserParams& p, std::uint64_t seed, double scale = 0.3) {
    Rng rng = make_rng(seed, 11);
    for (auto& [_, t] : p.tensors) {
        fill_normal(t.values(), rng);
        for (double& v : t.values()) v *= scale;
    }
}

std::vector<double> random_embedding(int dim, std::uint64_t seed) {
    std::vector<double> e(dim);
    Rng rng = make_rng(seed, 5);
    fill_normal(e, rng);
    return e;
}

double total_at(const DenoiserParams& p, const BatchItem& item, const NoiseSchedule& s,
                double lam) {
    return forward_with_loss(p, item, s, lam).loss.total;
}

// Largest relative error between analytic and central-difference gradients
// over up to `per_tensor` entries of every parameter tensor.
double param_grad_error(DenoiserParams p, const BatchItem& item, const NoiseSchedule& s,
                        double lam, double eps, int per_tensor) {
    const LossAndGrad lg = forward_with_loss(p, item, s, lam);
    double worst = 0.0;
    Rng rng = make_rng(99);
    for (auto& [name, t] : p.tensors) {
        const Tensor& g = lg.grads.at(name);
        const int n = std::min<int>(per_tensor, static_cast<int>(t.size()));
        for (int k = 0; k < n; ++k) {
            const size_t i = rng() % t.size();
            const double orig = t[i];
            t[i] = orig + eps;
            const double fp = total_at(p, item, s, lam);
            t[i] = orig - eps;
            const double fm = total_at(p, item, s, lam);
            t[i] = orig;
            const double num = (fp - fm) / (2 * eps);
            // the floor keeps exactly-zero gradients (key biases under the
            // softmax) from dividing central-difference round-off by ~0
            const double err =
                std::abs(g[i] - num) / std::max({std::abs(g[i]), std::abs(num), 1e-5});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

} // namespace

TEST_CASE("init is deterministic per seed") {
    const auto a = init_denoiser(tiny_config(), 5);
    const auto b = init_denoiser(tiny_config(), 5);
    const auto c = init_denoiser(tiny_config(), 6);
    CHECK(a.tensors == b.tensors);
    CHECK_FALSE(a.tensors == c.tensors);
    for (const auto& [_, t] : a.tensors) CHECK(all_finite(t.values()));
}

TEST_CASE("temporal output projections start at zero") {
    const auto p = init_denoiser(tiny_config(), 1);
    int found = 0;
    for (const auto& [name, t] : p.tensors) {
        if (is_temporal_param(name) && name.find(".out.") != std::string::npos) {
            ++found;
            for (double v : t.values()) CHECK(v == 0.0);
        }
    }
    CHECK(found == 6); // down0, mid, up0; weight and bias each
}

TEST_CASE("disabling temporal blocks removes their parameters") {
    const auto p = init_denoiser(tiny_config(false), 1);
    for (const auto& [name, _] : p.tensors) CHECK_FALSE(is_temporal_param(name));
    const auto q = init_denoiser(tiny_config(true), 1);
    int temporal = 0;
    for (const auto& [name, _] : q.tensors) temporal += is_temporal_param(name);
    CHECK(temporal > 0);
}

TEST_CASE("parameter count matches a layer-by-layer hand count") {
    DenoiserConfig c;
    c.video_channels = 3;
    c.in_channels = 3;
    c.base_width = 32;
    c.depth = 2;
    c.embed_dim = 64;
    // conv(cin, cout, k) = cout*cin*k*k + cout; linear(in, out) = out*in + out
    const size_t embeddings = 3 * (64 * 64 + 64) + 2 * 64;
    const size_t image_encoder = (32 * 3 * 9 + 32) + (64 * 32 * 9 + 64) + (64 * 64 + 64);
    const size_t in_conv = 32 * 3 * 9 + 32;
    const size_t down0 = (32 * 32 * 9 + 32) + (32 * 64 + 32) + (32 * 32 * 9 + 32);
    const size_t down1 = (64 * 32 * 9 + 64) + (64 * 64 + 64) + (64 * 64 * 9 + 64) + (64 * 32 + 64);
    const size_t mid = (64 * 64 * 9 + 64) + (64 * 64 + 64) + (64 * 64 * 9 + 64);
    const size_t up1 = (64 * 128 * 9 + 64) + (64 * 64 + 64) + (64 * 64 * 9 + 64) + (64 * 128 + 64);
    const size_t up0 = (32 * 96 * 9 + 32) + (32 * 64 + 32) + (32 * 32 * 9 + 32) + (32 * 96 + 32);
    const size_t out_conv = 3 * 32 * 9 + 3;
    const size_t spatial =
        embeddings + image_encoder + in_conv + down0 + down1 + mid + up1 + up0 + out_conv;
    const size_t tconv32 = 32 * 32 * 3 + 32 + 32 * 32 + 32;
    const size_t tconv64 = 64 * 64 * 3 + 64 + 64 * 64 + 64;
    const size_t attn64 = 4 * (64 * 64 + 64);
    const size_t temporal = 2 * tconv32 + 2 * tconv64 + attn64;

    CHECK(spatial + temporal == 421443);
    CHECK(denoiser_param_count(c) == spatial + temporal);
    CHECK(init_denoiser(c, 0).count() == spatial + temporal);
    c.temporal_enabled = false;
    CHECK(denoiser_param_count(c) == spatial);
    CHECK(init_denoiser(c, 0).count() == spatial);
    c.in_channels = 7;
    CHECK(init_denoiser(c, 0).count() == spatial + 4 * 32 * 9);
}

TEST_CASE("invalid configs are rejected") {
    auto c = tiny_config();
    c.in_channels = 5;
    CHECK_THROWS_AS(init_denoiser(c, 0), ConfigError);
    c = tiny_config();
    c.embed_dim = 0;
    CHECK_THROWS_AS(init_denoiser(c, 0), ConfigError);
    c = tiny_config();
    c.depth = 0;
    CHECK_THROWS_AS(init_denoiser(c, 0), ConfigError);
    CHECK_THROWS_AS(tiny_config().validate(7, 8), ConfigError);
}

TEST_CASE("config json round trip") {
    const auto c = tiny_config(false, true);
    CHECK(denoiser_config_from_json(to_json(c)) == c);
}

TEST_CASE("output shape and determinism") {
    const auto p = init_denoiser(tiny_config(), 2);
    const VideoTensor x = random_video(3, 3, 8, 8, 1);
    const VideoTensor a = denoise(p, x, 10, {});
    CHECK(a.same_shape(x));
    CHECK(a == denoise(p, x, 10, {}));
    CHECK(all_finite(a.values()));
}

TEST_CASE("single frame input reduces to the spatial-only network") {
    auto with = init_denoiser(tiny_config(true), 3);
    randomize(with, 4);
    DenoiserParams without = with;
    without.config.temporal_enabled = false;
    std::erase_if(without.tensors, [](const auto& kv) { return is_temporal_param(kv.first); });
    const VideoTensor x = random_video(1, 3, 8, 8, 2);
    ConditionBundle cond;
    cond.text_embedding = random_embedding(8, 1);
    CHECK(denoise(with, x, 40, cond) == denoise(without, x, 40, cond));
}

TEST_CASE("fresh params map identical frames to identical outputs") {
    const auto p = init_denoiser(tiny_config(true), 5);
    const VideoTensor one = random_video(1, 3, 8, 8, 3);
    VideoTensor x(4, 3, 8, 8);
    for (int f = 0; f < 4; ++f)
        std::copy(one.values().begin(), one.values().end(), x.frame(f).begin());
    const VideoTensor y = denoise(p, x, 100, {});
    for (int f = 1; f < 4; ++f) {
        CHECK(std::equal(y.frame(f).begin(), y.frame(f).end(), y.frame(0).begin()));
    }
}

TEST_CASE("identical frames stay identical through trained temporal blocks") {
    auto p = init_denoiser(tiny_config(true), 5);
    randomize(p, 6);
    const VideoTensor one = random_video(1, 3, 8, 8, 3);
    VideoTensor x(4, 3, 8, 8);
    for (int f = 0; f < 4; ++f)
        std::copy(one.values().begin(), one.values().end(), x.frame(f).begin());
    const VideoTensor y = denoise(p, x, 100, {});
    for (int f = 1; f < 4; ++f) {
        for (size_t i = 0; i < y.frame_size(); ++i) CHECK(y.frame(f)[i] == doctest::Approx(y.frame(0)[i]));
    }
}

TEST_CASE("frame locality without temporal blocks") {
    auto p = init_denoiser(tiny_config(false), 7);
    randomize(p, 8);
    const VideoTensor x = random_video(4, 3, 8, 8, 4);
    VideoTensor x2 = x;
    for (double& v : x2.frame(0)) v += 0.5;
    const VideoTensor a = denoise(p, x, 300, {});
    const VideoTensor b = denoise(p, x2, 300, {});
    for (int f = 1; f < 4; ++f) {
        CHECK(std::equal(a.frame(f).begin(), a.frame(f).end(), b.frame(f).begin()));
    }
    CHECK_FALSE(std::equal(a.frame(0).begin(), a.frame(0).end(), b.frame(0).begin()));

    // and with temporal blocks active, frame 0 does reach its neighbours
    auto q = init_denoiser(tiny_config(true), 7);
    randomize(q, 8);
    const VideoTensor c = denoise(q, x, 300, {});
    const VideoTensor d = denoise(q, x2, 300, {});
    CHECK(max_abs_diff(c.frame_video(1).tensor(), d.frame_video(1).tensor()) > 0.0);
}

TEST_CASE("frame permutation covariance without temporal blocks") {
    auto p = init_denoiser(tiny_config(false), 9);
    randomize(p, 10);
    const VideoTensor x = random_video(4, 3, 8, 8, 5);
    const int perm[4] = {2, 0, 3, 1};
    VideoTensor xp(4, 3, 8, 8);
    for (int f = 0; f < 4; ++f)
        std::copy(x.frame(perm[f]).begin(), x.frame(perm[f]).end(), xp.frame(f).begin());
    const VideoTensor y = denoise(p, x, 500, {});
    const VideoTensor yp = denoise(p, xp, 500, {});
    for (int f = 0; f < 4; ++f) {
        CHECK(std::equal(yp.frame(f).begin(), yp.frame(f).end(), y.frame(perm[f]).begin()));
    }
}

TEST_CASE("conditions change the output") {
    auto p = init_denoiser(tiny_config(false, true), 11);
    randomize(p, 12);
    const VideoTensor x = random_video(2, 3, 8, 8, 6);
    ConditionBundle a, b;
    a.text_embedding = random_embedding(8, 1);
    b.text_embedding = random_embedding(8, 2);
    CHECK(max_abs_diff(denoise(p, x, 200, a).tensor(), denoise(p, x, 200, b).tensor()) > 0.0);

    ConditionBundle img;
    img.image_embedding = random_embedding(8, 3);
    CHECK(max_abs_diff(denoise(p, x, 200, {}).tensor(), denoise(p, x, 200, img).tensor()) > 0.0);

    ConditionBundle st;
    st.structural = StructuralMaps{Tensor({2, 4, 8, 8}, 0.5), true, false, false};
    CHECK(max_abs_diff(denoise(p, x, 200, {}).tensor(), denoise(p, x, 200, st).tensor()) > 0.0);

    // absent maps are zero channels
    ConditionBundle zero;
    zero.structural = StructuralMaps{Tensor({2, 4, 8, 8}, 0.0), false, false, false};
    CHECK(denoise(p, x, 200, {}) == denoise(p, x, 200, zero));
}

TEST_CASE("denoise input validation") {
    const auto p = init_denoiser(tiny_config(), 1);
    CHECK_THROWS_AS(denoise(p, random_video(2, 4, 8, 8, 1), 0, {}), ShapeError);
    CHECK_THROWS_AS(denoise(p, random_video(2, 3, 5, 8, 1), 0, {}), ShapeError);
    CHECK_THROWS_AS(denoise(p, random_video(2, 3, 8, 8, 1), -1, {}), RangeError);
    ConditionBundle bad;
    bad.text_embedding = std::vector<double>(5, 0.0);
    CHECK_THROWS_AS(denoise(p, random_video(2, 3, 8, 8, 1), 0, bad), ShapeError);
    ConditionBundle maps;
    maps.structural = StructuralMaps{Tensor({2, 4, 8, 8}, 1.0), true, false, false};
    CHECK_THROWS_AS(denoise(p, random_video(2, 3, 8, 8, 1), 0, maps), ShapeError);
    const auto ps = init_denoiser(tiny_config(true, true), 1);
    maps.structural->maps = Tensor({1, 4, 8, 8}, 1.0);
    CHECK_THROWS_AS(denoise(ps, random_video(2, 3, 8, 8, 1), 0, maps), ShapeError);
}

TEST_CASE("forward_with_loss gradients match finite differences on a one-frame toy") {
    auto p = init_denoiser(tiny_config(true), 13);
    randomize(p, 14);
    const NoiseSchedule s = make_linear_schedule(1000, 1e-4, 2e-2);
    BatchItem item;
    item.x0 = random_video(1, 3, 8, 8, 7);
    item.noise = random_video(1, 3, 8, 8, 8);
    item.t = 400;
    item.text_embedding = random_embedding(8, 4);
    CHECK(param_grad_error(p, item, s, 0.1, 1e-5, 6) < 1e-4);
}

TEST_CASE("forward_with_loss gradients match finite differences on a clip") {
    auto p = init_denoiser(tiny_config(true, true), 15);
    randomize(p, 16);
    const NoiseSchedule s = make_linear_schedule(1000, 1e-4, 2e-2);
    BatchItem item;
    item.x0 = random_video(3, 3, 8, 8, 9);
    item.noise = random_video(3, 3, 8, 8, 10);
    item.t = 650;
    item.branch = Branch::motion;
    item.image_source = item.x0.frame_video(1);
    item.structural = StructuralMaps{random_video(3, 4, 8, 8, 11).tensor(), true, true, true};
    CHECK(param_grad_error(p, item, s, 0.1, 1e-5, 4) < 1e-4);
    CHECK(param_grad_error(p, item, s, 0.1, 1e-5, 4) < 1e-4);
}

TEST_CASE("loss report identities") {
    auto p = init_denoiser(tiny_config(), 17);
    const NoiseSchedule s = make_linear_schedule(1000, 1e-4, 2e-2);
    BatchItem item;
    item.x0 = random_video(3, 3, 8, 8, 12);
    item.noise = random_video(3, 3, 8, 8, 13);
    item.t = 250;
    const auto r = forward_with_loss(p, item, s, 0.1);
    CHECK(r.loss.base >= 0.0);
    CHECK(r.loss.coherence > 0.0);
    CHECK(std::abs(r.loss.total - (r.loss.base + 0.1 * r.loss.coherence)) < 1e-12);
    CHECK(r.grads.size() == p.tensors.size());

    BatchItem still = item;
    still.x0 = random_video(1, 3, 8, 8, 12);
    still.noise = random_video(1, 3, 8, 8, 13);
    CHECK(forward_with_loss(p, still, s, 0.1).loss.coherence == 0.0);

    const auto data = forward_with_loss(p, item, s, 0.1, CoherenceSpace::data);
    CHECK(data.loss.coherence ==
          doctest::Approx(r.loss.coherence * (1.0 - s.alpha_bars[250])).epsilon(1e-12));
    CHECK_THROWS_AS(forward_with_loss(p, item, s, -1.0), RangeError);
}

TEST_CASE("lam = 0 gives exactly the base-loss gradient") {
    auto p = init_denoiser(tiny_config(), 18);
    randomize(p, 19);
    const NoiseSchedule s = make_linear_schedule(1000, 1e-4, 2e-2);
    BatchItem item;
    item.x0 = random_video(3, 3, 8, 8, 14);
    item.noise = random_video(3, 3, 8, 8, 15);
    item.t = 77;
    const auto full = forward_with_loss(p, item, s, 0.0);

    // base loss alone, assembled by hand
    ad::Graph g;
    const VideoTensor xt = q_sample(item.x0, item.t, item.noise, s);
    const VideoTensor vt = v_from_x0_eps(item.x0, item.noise, item.t, s);
    ad::Var v = denoiser_graph(g, p, g.constant(xt.tensor()), item.t, {});
    g.backward(ad::mse(g, v, vt.tensor()));
    for (const auto& [name, var] : g.params()) CHECK(g.grad(var) == full.grads.at(name));
}

TEST_CASE("duplicate-frame inputs give no coherence gradient through temporal blocks") {
    auto p = init_denoiser(tiny_config(true), 20); // zeroed temporal projections
    const NoiseSchedule s = make_linear_schedule(1000, 1e-4, 2e-2);
    const int t = 500;
    BatchItem item;
    item.x0 = random_video(4, 3, 8, 8, 16);
    // choose noise so every frame of x_t is the same image
    const VideoTensor common = random_video(1, 3, 8, 8, 17);
    item.noise = VideoTensor(4, 3, 8, 8);
    for (int f = 0; f < 4; ++f)
        for (size_t i = 0; i < item.x0.frame_size(); ++i)
            item.noise.frame(f)[i] = (common.values()[i] - s.sqrt_alpha_bars[t] * item.x0.frame(f)[i]) /
                                     s.sqrt_one_minus_alpha_bars[t];
    item.t = t;
    const VideoTensor xt = q_sample(item.x0, t, item.noise, s);
    for (int f = 1; f < 4; ++f)
        CHECK(max_abs_diff(xt.frame_video(f).tensor(), xt.frame_video(0).tensor()) < 1e-12);

    const auto with = forward_with_loss(p, item, s, 1.0);
    const auto without = forward_with_loss(p, item, s, 0.0);
    CHECK(with.loss.coherence > 0.0);
    double temporal_max = 0.0, spatial_max = 0.0;
    for (const auto& [name, g1] : with.grads) {
        const double d = max_abs_diff(g1, without.grads.at(name));
        (is_temporal_param(name) ? temporal_max : spatial_max) =
            std::max(is_temporal_param(name) ? temporal_max : spatial_max, d);
    }
    CHECK(temporal_max < 1e-12);
    CHECK(spatial_max < 1e-12); // spatial paths are frame-symmetric too
}

TEST_CASE("checkpoint round trip and corruption") {
    const auto dir = std::filesystem::temp_directory_path() / "tfv_test_ckpt";
    std::filesystem::remove_all(dir);
    auto p = init_denoiser(tiny_config(true, true), 21);
    randomize(p, 22);
    const auto path = dir / "model.ckpt";
    write_checkpoint(path, make_checkpoint(p, 1234));
    CHECK_FALSE(std::filesystem::exists(dir / "model.ckpt.tmp"));
    const Checkpoint c = read_checkpoint(path);
    CHECK(c.meta.at("step").get<long>() == 1234);
    const DenoiserParams q = params_from_checkpoint(c);
    CHECK(q.config == p.config);
    CHECK(q.init_seed == 21);
    CHECK(q.tensors == p.tensors);

    std::string bytes;
    {
        std::ifstream is(path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(is), {});
    }
    auto write_bytes = [&](const std::string& b) {
        std::ofstream os(dir / "bad.ckpt", std::ios::binary | std::ios::trunc);
        os.write(b.data(), static_cast<std::streamsize>(b.size()));
    };
    std::string flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x40;
    write_bytes(flipped);
    CHECK_THROWS_AS(read_checkpoint(dir / "bad.ckpt"), IntegrityError);
    write_bytes(bytes.substr(0, bytes.size() - 100));
    CHECK_THROWS_AS(read_checkpoint(dir / "bad.ckpt"), IntegrityError);
    write_bytes("not a checkpoint at all");
    CHECK_THROWS_AS(read_checkpoint(dir / "bad.ckpt"), IntegrityError);
    CHECK_THROWS_AS(read_checkpoint(dir / "missing.ckpt"), IntegrityError);

    Checkpoint missing = c;
    missing.arrays.erase("param/out.conv.w");
    CHECK_THROWS_AS(params_from_checkpoint(missing), IntegrityError);
    std::filesystem::remove_all(dir);
}
