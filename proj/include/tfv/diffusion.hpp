#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "tfv/condition_bundle.hpp"
#include "tfv/tensor.hpp"

namespace tfv {

// Per-timestep constants of a discrete forward process with T steps.
//
// The forward kernel is q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t I).
// Some write-ups print the mean coefficient as sqrt(1 - beta_{t-1}); that
// index is a typo and the same-step beta_t is used here, which is what makes
// the closed-form marginal below hold.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;
    std::vector<double> sqrt_alpha_bars;
    std::vector<double> sqrt_one_minus_alpha_bars;

    static NoiseSchedule from_betas(std::vector<double> betas);

    void check_timestep(int t) const;
    // alpha_bar at t, with alpha_bar(-1) == 1.
    double alpha_bar_or_one(int t) const { return t < 0 ? 1.0 : alpha_bars[t]; }
};

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end);

struct SamplerConfig {
    int num_steps = 50;
    double eta = 0.0;
    double guidance_scale = 1.0;
    std::uint64_t seed = 0;
};

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
VideoTensor q_sample(const VideoTensor& x0, int t, const VideoTensor& eps,
                     const NoiseSchedule& sched);

// v = sqrt(abar_t) eps - sqrt(1 - abar_t) x0
VideoTensor v_from_x0_eps(const VideoTensor& x0, const VideoTensor& eps, int t,
                          const NoiseSchedule& sched);
// x0 = sqrt(abar_t) x_t - sqrt(1 - abar_t) v
VideoTensor x0_from_v(const VideoTensor& x_t, const VideoTensor& v, int t,
                      const NoiseSchedule& sched);
// eps = sqrt(1 - abar_t) x_t + sqrt(abar_t) v
VideoTensor eps_from_v(const VideoTensor& x_t, const VideoTensor& v, int t,
                       const NoiseSchedule& sched);

// Mean squared error over every element of every frame.
double base_loss(const VideoTensor& v_pred, const VideoTensor& v_target);

// Squared mismatch of adjacent-frame differences, divided by the element count
// of the (F - 1)-frame difference stack. Zero for single-frame inputs.
double coherence_loss(const VideoTensor& v_pred_frames, const VideoTensor& v_target_frames);

double total_loss(double base, double coherence, double lam = 0.1);

// Posterior variance beta_t (1 - abar_{t-1}) / (1 - abar_t).
double posterior_variance(const NoiseSchedule& sched, int t);

// One ancestral step x_t -> x_{t-1} with fixed posterior variance; `noise` is
// ignored at t == 0.
VideoTensor ddpm_step(const VideoTensor& x_t, const VideoTensor& v_pred, int t,
                      const NoiseSchedule& sched, const VideoTensor& noise);

// Generalized DDIM update from t to t_prev (t_prev == -1 means "to data").
VideoTensor ddim_step(const VideoTensor& x_t, const VideoTensor& v_pred, int t, int t_prev,
                      const NoiseSchedule& sched, double eta, const VideoTensor& noise);

// Uniform-stride decreasing subsequence from T-1 down to 0, both included.
std::vector<int> ddim_timesteps(int T, int num_steps);

VideoTensor cfg_combine(const VideoTensor& v_uncond, const VideoTensor& v_cond, double w);

struct VideoShape {
    int frames = 1;
    int channels = 3;
    int height = 32;
    int width = 32;
};

using DenoiseFn =
    std::function<VideoTensor(const VideoTensor& x, int t, const ConditionBundle& cond)>;

// Full reverse trajectory over `timesteps` (strictly decreasing, ending at 0).
// Guidance is applied whenever cfg.guidance_scale != 1.
VideoTensor ddim_sample(const DenoiseFn& denoise_fn, const ConditionBundle& cond,
                        const VideoShape& shape, const NoiseSchedule& sched,
                        const SamplerConfig& cfg, const std::vector<int>& timesteps);

// Starts from a caller-supplied x_T instead of drawing one from cfg.seed;
// cfg.seed still drives the per-step noise when eta > 0.
VideoTensor ddim_sample_from(const DenoiseFn& denoise_fn, const ConditionBundle& cond,
                             VideoTensor x_T, const NoiseSchedule& sched,
                             const SamplerConfig& cfg, const std::vector<int>& timesteps);

// Same, with the default uniform timestep subsequence of cfg.num_steps entries.
VideoTensor ddim_sample(const DenoiseFn& denoise_fn, const ConditionBundle& cond,
                        const VideoShape& shape, const NoiseSchedule& sched,
                        const SamplerConfig& cfg);

} // namespace tfv
