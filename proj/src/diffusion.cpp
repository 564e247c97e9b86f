#include "tfv/diffusion.hpp"

#include <cmath>
#include <string>

#include "tfv/random.hpp"

namespace tfv {

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
    if (betas.empty()) throw RangeError("noise schedule needs T >= 1");
    NoiseSchedule s;
    s.T = static_cast<int>(betas.size());
    s.betas = std::move(betas);
    s.alphas.resize(s.T);
    s.alpha_bars.resize(s.T);
    s.sqrt_alpha_bars.resize(s.T);
    s.sqrt_one_minus_alpha_bars.resize(s.T);
    double prod = 1.0;
    for (int t = 0; t < s.T; ++t) {
        const double b = s.betas[t];
        if (!(b > 0.0 && b < 1.0)) {
            throw RangeError("beta[" + std::to_string(t) + "] outside (0, 1)");
        }
        s.alphas[t] = 1.0 - b;
        prod *= s.alphas[t];
        s.alpha_bars[t] = prod;
        s.sqrt_alpha_bars[t] = std::sqrt(prod);
        s.sqrt_one_minus_alpha_bars[t] = std::sqrt(1.0 - prod);
    }
    return s;
}

void NoiseSchedule::check_timestep(int t) const {
    if (t < 0 || t >= T) {
        throw RangeError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) +
                         ")");
    }
}

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw RangeError("make_linear_schedule: T must be positive");
    if (!(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0)) {
        throw RangeError("make_linear_schedule: endpoints must lie in (0, 1)");
    }
    if (beta_start > beta_end) {
        throw RangeError("make_linear_schedule: beta_start must not exceed beta_end");
    }
    std::vector<double> betas(T);
    for (int t = 0; t < T; ++t) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(t) / (T - 1);
        betas[t] = beta_start + (beta_end - beta_start) * frac;
    }
    return NoiseSchedule::from_betas(std::move(betas));
}

namespace {

// out = a * x + b * y, elementwise
VideoTensor axpby(double a, const VideoTensor& x, double b, const VideoTensor& y) {
    VideoTensor out = x;
    auto o = out.values();
    auto yv = y.values();
    for (size_t i = 0; i < o.size(); ++i) o[i] = a * o[i] + b * yv[i];
    return out;
}

} // namespace

VideoTensor q_sample(const VideoTensor& x0, int t, const VideoTensor& eps,
                     const NoiseSchedule& sched) {
    require_same_shape(x0, eps, "q_sample");
    sched.check_timestep(t);
    return axpby(sched.sqrt_alpha_bars[t], x0, sched.sqrt_one_minus_alpha_bars[t], eps);
}

VideoTensor v_from_x0_eps(const VideoTensor& x0, const VideoTensor& eps, int t,
                          const NoiseSchedule& sched) {
    require_same_shape(x0, eps, "v_from_x0_eps");
    sched.check_timestep(t);
    return axpby(-sched.sqrt_one_minus_alpha_bars[t], x0, sched.sqrt_alpha_bars[t], eps);
}

VideoTensor x0_from_v(const VideoTensor& x_t, const VideoTensor& v, int t,
                      const NoiseSchedule& sched) {
    require_same_shape(x_t, v, "x0_from_v");
    sched.check_timestep(t);
    return axpby(sched.sqrt_alpha_bars[t], x_t, -sched.sqrt_one_minus_alpha_bars[t], v);
}

VideoTensor eps_from_v(const VideoTensor& x_t, const VideoTensor& v, int t,
                       const NoiseSchedule& sched) {
    require_same_shape(x_t, v, "eps_from_v");
    sched.check_timestep(t);
    return axpby(sched.sqrt_one_minus_alpha_bars[t], x_t, sched.sqrt_alpha_bars[t], v);
}

double base_loss(const VideoTensor& v_pred, const VideoTensor& v_target) {
    require_same_shape(v_pred, v_target, "base_loss");
    const auto p = v_pred.values();
    const auto q = v_target.values();
    if (p.empty()) return 0.0;
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        const double d = p[i] - q[i];
        acc += d * d;
    }
    return acc / static_cast<double>(p.size());
}

double coherence_loss(const VideoTensor& v_pred_frames, const VideoTensor& v_target_frames) {
    require_same_shape(v_pred_frames, v_target_frames, "coherence_loss");
    const int F = v_pred_frames.frames();
    if (F < 2) return 0.0;
    const size_t n = v_pred_frames.frame_size();
    double acc = 0.0;
    for (int j = 0; j + 1 < F; ++j) {
        auto p0 = v_pred_frames.frame(j);
        auto p1 = v_pred_frames.frame(j + 1);
        auto o0 = v_target_frames.frame(j);
        auto o1 = v_target_frames.frame(j + 1);
        for (size_t i = 0; i < n; ++i) {
            const double d = (p1[i] - p0[i]) - (o1[i] - o0[i]);
            acc += d * d;
        }
    }
    return acc / (static_cast<double>(F - 1) * static_cast<double>(n));
}

double total_loss(double base, double coherence, double lam) {
    if (lam < 0.0) throw RangeError("total_loss: lam must be non-negative");
    return base + lam * coherence;
}

double posterior_variance(const NoiseSchedule& sched, int t) {
    sched.check_timestep(t);
    if (t == 0) return 0.0;
    return sched.betas[t] * (1.0 - sched.alpha_bars[t - 1]) / (1.0 - sched.alpha_bars[t]);
}

VideoTensor ddpm_step(const VideoTensor& x_t, const VideoTensor& v_pred, int t,
                      const NoiseSchedule& sched, const VideoTensor& noise) {
    require_same_shape(x_t, v_pred, "ddpm_step");
    require_same_shape(x_t, noise, "ddpm_step noise");
    sched.check_timestep(t);
    const VideoTensor x0 = x0_from_v(x_t, v_pred, t, sched);
    const double abar = sched.alpha_bars[t];
    const double abar_prev = sched.alpha_bar_or_one(t - 1);
    const double c_x0 = std::sqrt(abar_prev) * sched.betas[t] / (1.0 - abar);
    const double c_xt = std::sqrt(sched.alphas[t]) * (1.0 - abar_prev) / (1.0 - abar);
    VideoTensor mean = axpby(c_x0, x0, c_xt, x_t);
    if (t == 0) return mean;
    const double sigma = std::sqrt(posterior_variance(sched, t));
    return axpby(1.0, mean, sigma, noise);
}

VideoTensor ddim_step(const VideoTensor& x_t, const VideoTensor& v_pred, int t, int t_prev,
                      const NoiseSchedule& sched, double eta, const VideoTensor& noise) {
    require_same_shape(x_t, v_pred, "ddim_step");
    require_same_shape(x_t, noise, "ddim_step noise");
    sched.check_timestep(t);
    if (t_prev >= t || t_prev < -1) throw RangeError("ddim_step: t_prev must lie in [-1, t)");
    if (eta < 0.0 || eta > 1.0) throw RangeError("ddim_step: eta outside [0, 1]");
    const VideoTensor x0 = x0_from_v(x_t, v_pred, t, sched);
    const VideoTensor eps = eps_from_v(x_t, v_pred, t, sched);
    const double abar = sched.alpha_bars[t];
    const double abar_prev = sched.alpha_bar_or_one(t_prev);
    const double sigma = eta * std::sqrt((1.0 - abar_prev) / (1.0 - abar)) *
                         std::sqrt(1.0 - abar / abar_prev);
    const double dir = std::sqrt(std::max(0.0, 1.0 - abar_prev - sigma * sigma));
    VideoTensor out = axpby(std::sqrt(abar_prev), x0, dir, eps);
    if (sigma > 0.0) out = axpby(1.0, out, sigma, noise);
    return out;
}

std::vector<int> ddim_timesteps(int T, int num_steps) {
    if (T < 1) throw RangeError("ddim_timesteps: T must be positive");
    if (num_steps < 1 || num_steps > T) {
        throw RangeError("ddim_timesteps: num_steps must lie in [1, T]");
    }
    std::vector<int> ts(num_steps);
    if (num_steps == 1) {
        ts[0] = 0;
        return ts;
    }
    for (int i = 0; i < num_steps; ++i) {
        const double pos = static_cast<double>(T - 1) * (num_steps - 1 - i) / (num_steps - 1);
        ts[i] = static_cast<int>(std::lround(pos));
    }
    return ts;
}

VideoTensor cfg_combine(const VideoTensor& v_uncond, const VideoTensor& v_cond, double w) {
    require_same_shape(v_uncond, v_cond, "cfg_combine");
    return axpby(1.0 - w, v_uncond, w, v_cond);
}

namespace {

VideoTensor run_ddim(const DenoiseFn& denoise_fn, const ConditionBundle& cond, VideoTensor x,
                     Rng& rng, const NoiseSchedule& sched, const SamplerConfig& cfg,
                     const std::vector<int>& timesteps) {
    if (timesteps.empty()) throw RangeError("ddim_sample: empty timestep sequence");
    for (size_t i = 0; i < timesteps.size(); ++i) {
        sched.check_timestep(timesteps[i]);
        if (i > 0 && timesteps[i] >= timesteps[i - 1]) {
            throw RangeError("ddim_sample: timesteps must be strictly decreasing");
        }
    }
    if (timesteps.back() != 0) throw RangeError("ddim_sample: timesteps must end at 0");
    if (cfg.guidance_scale < 0.0) throw RangeError("ddim_sample: negative guidance scale");

    VideoTensor noise(x.frames(), x.channels(), x.height(), x.width());
    const bool guided = cfg.guidance_scale != 1.0;
    const ConditionBundle uncond = cond.unconditional();

    for (size_t i = 0; i < timesteps.size(); ++i) {
        const int t = timesteps[i];
        const int t_prev = i + 1 < timesteps.size() ? timesteps[i + 1] : -1;
        VideoTensor v = denoise_fn(x, t, cond);
        if (guided) v = cfg_combine(denoise_fn(x, t, uncond), v, cfg.guidance_scale);
        if (cfg.eta > 0.0) fill_normal(noise.values(), rng);
        x = ddim_step(x, v, t, t_prev, sched, cfg.eta, noise);
    }
    return x;
}

} // namespace

VideoTensor ddim_sample(const DenoiseFn& denoise_fn, const ConditionBundle& cond,
                        const VideoShape& shape, const NoiseSchedule& sched,
                        const SamplerConfig& cfg, const std::vector<int>& timesteps) {
    Rng rng = make_rng(cfg.seed, 0x5a4d);
    VideoTensor x(shape.frames, shape.channels, shape.height, shape.width);
    fill_normal(x.values(), rng);
    return run_ddim(denoise_fn, cond, std::move(x), rng, sched, cfg, timesteps);
}

VideoTensor ddim_sample_from(const DenoiseFn& denoise_fn, const ConditionBundle& cond,
                             VideoTensor x_T, const NoiseSchedule& sched,
                             const SamplerConfig& cfg, const std::vector<int>& timesteps) {
    Rng rng = make_rng(cfg.seed, 0x5a4d);
    return run_ddim(denoise_fn, cond, std::move(x_T), rng, sched, cfg, timesteps);
}

VideoTensor ddim_sample(const DenoiseFn& denoise_fn, const ConditionBundle& cond,
                        const VideoShape& shape, const NoiseSchedule& sched,
                        const SamplerConfig& cfg) {
    return ddim_sample(denoise_fn, cond, shape, sched, cfg,
                       ddim_timesteps(sched.T, cfg.num_steps));
}

} // namespace tfv
