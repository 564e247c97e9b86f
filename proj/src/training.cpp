#include "tfv/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "tfv/json_fields.hpp"
#include "tfv/random.hpp"

namespace tfv {

const char* to_string(Regime r) {
    switch (r) {
    case Regime::text_free: return "text_free";
    case Regime::semi_supervised: return "semi_supervised";
    case Regime::fully_supervised: return "fully_supervised";
    }
    return "?";
}

Regime parse_regime(const std::string& s) {
    for (Regime r : {Regime::text_free, Regime::semi_supervised, Regime::fully_supervised})
        if (s == to_string(r)) return r;
    throw ConfigError("unknown regime '" + s + "'");
}

namespace {

const char* to_string(CoherenceSpace s) { return s == CoherenceSpace::data ? "data" : "velocity"; }

CoherenceSpace parse_coherence_space(const std::string& s) {
    if (s == "velocity") return CoherenceSpace::velocity;
    if (s == "data") return CoherenceSpace::data;
    throw ConfigError("unknown coherence space '" + s + "'");
}

void require_prob(double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) {
        throw ConfigError(std::string("train.") + name + ": must lie in [0, 1]");
    }
}

} // namespace

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0)) throw ConfigError("train.learning_rate: must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1: must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2: must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay: must be non-negative");
    if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps: must be positive");
    if (!(lam >= 0.0)) throw ConfigError("train.lam: must be non-negative");
    if (batch_size < 1) throw ConfigError("train.batch_size: must be at least 1");
    require_prob(image_batch_fraction, "image_batch_fraction");
    require_prob(paired_fraction, "paired_fraction");
    require_prob(p_drop_text, "p_drop_text");
    require_prob(p_drop_image, "p_drop_image");
    require_prob(structural_prob, "structural_prob");
    require_prob(spatial_stage_fraction, "spatial_stage_fraction");
    if (total_steps < 0) throw ConfigError("train.total_steps: must be non-negative");
    if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every: must be non-negative");
    if (schedule.T < 1) throw ConfigError("train.schedule.T: must be positive");
    if (!(schedule.beta_start > 0.0 && schedule.beta_start <= schedule.beta_end &&
          schedule.beta_end < 1.0)) {
        throw ConfigError("train.schedule: need 0 < beta_start <= beta_end < 1");
    }
    try {
        model.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("train.model: ") + e.what());
    }
}

std::int64_t TrainConfig::spatial_steps() const {
    if (joint) return 0;
    return static_cast<std::int64_t>(std::llround(spatial_stage_fraction * total_steps));
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"weight_decay", c.weight_decay},
            {"adam_eps", c.adam_eps},
            {"clip_norm", c.clip_norm},
            {"lam", c.lam},
            {"batch_size", c.batch_size},
            {"image_batch_fraction", c.image_batch_fraction},
            {"paired_fraction", c.paired_fraction},
            {"p_drop_text", c.p_drop_text},
            {"p_drop_image", c.p_drop_image},
            {"structural_prob", c.structural_prob},
            {"total_steps", c.total_steps},
            {"seed", c.seed},
            {"regime", to_string(c.regime)},
            {"coherence_enabled", c.coherence_enabled},
            {"coherence_space", to_string(c.coherence_space)},
            {"joint", c.joint},
            {"spatial_stage_fraction", c.spatial_stage_fraction},
            {"checkpoint_every", c.checkpoint_every},
            {"init_seed", c.init_seed},
            {"codebook_seed", c.codebook_seed},
            {"model", to_json(c.model)},
            {"schedule", {{"T", c.schedule.T},
                          {"beta_start", c.schedule.beta_start},
                          {"beta_end", c.schedule.beta_end}}}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path) {
    TrainConfig c;
    JsonFields f(j, path);
    f.read("learning_rate", c.learning_rate);
    f.read("beta1", c.beta1);
    f.read("beta2", c.beta2);
    f.read("weight_decay", c.weight_decay);
    f.read("adam_eps", c.adam_eps);
    f.read("clip_norm", c.clip_norm);
    f.read("lam", c.lam);
    f.read("batch_size", c.batch_size);
    f.read("image_batch_fraction", c.image_batch_fraction);
    f.read("paired_fraction", c.paired_fraction);
    f.read("p_drop_text", c.p_drop_text);
    f.read("p_drop_image", c.p_drop_image);
    f.read("structural_prob", c.structural_prob);
    f.read("total_steps", c.total_steps);
    f.read("seed", c.seed);
    f.read_enum("regime", c.regime, parse_regime);
    f.read("coherence_enabled", c.coherence_enabled);
    f.read_enum("coherence_space", c.coherence_space, parse_coherence_space);
    f.read("joint", c.joint);
    f.read("spatial_stage_fraction", c.spatial_stage_fraction);
    f.read("checkpoint_every", c.checkpoint_every);
    f.read("init_seed", c.init_seed);
    f.read("codebook_seed", c.codebook_seed);
    if (const auto* m = f.child("model")) {
        JsonFields mf(*m, f.field("model"));
        mf.read("video_channels", c.model.video_channels);
        mf.read("in_channels", c.model.in_channels);
        mf.read("base_width", c.model.base_width);
        mf.read("depth", c.model.depth);
        mf.read("embed_dim", c.model.embed_dim);
        mf.read("temporal_enabled", c.model.temporal_enabled);
        mf.finish();
    }
    if (const auto* s = f.child("schedule")) {
        JsonFields sf(*s, f.field("schedule"));
        sf.read("T", c.schedule.T);
        sf.read("beta_start", c.schedule.beta_start);
        sf.read("beta_end", c.schedule.beta_end);
        sf.finish();
    }
    f.finish();
    return c;
}

TrainingPool make_training_pool(const Corpus& corpus, bool with_structural) {
    TrainingPool pool;
    pool.kind = corpus.kind;
    pool.videos.reserve(corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) {
        pool.videos.push_back(corpus.render(i));
        pool.specs.push_back(corpus.items[i].spec);
        pool.captions.push_back(corpus.training_caption(i));
        if (with_structural) {
            pool.structural.push_back(
                structural_maps_for(pool.specs.back(), pool.videos.back(), true, true, true));
        }
    }
    return pool;
}

namespace {

StructuralMaps select_structural(const StructuralMaps& full, bool allow_motion, Rng& rng) {
    bool use[3] = {uniform01(rng) < 0.5, uniform01(rng) < 0.5,
                   allow_motion && uniform01(rng) < 0.5};
    if (!use[0] && !use[1] && !use[2]) use[rng() % (allow_motion ? 3 : 2)] = true;
    StructuralMaps m;
    m.maps = full.maps;
    m.has_depth = use[0];
    m.has_sketch = use[1];
    m.has_motion = use[2];
    const int F = m.maps.dim(0);
    const size_t P = static_cast<size_t>(m.maps.dim(2)) * m.maps.dim(3);
    for (int f = 0; f < F; ++f) {
        double* base = m.maps.data() + static_cast<size_t>(f) * kStructuralChannels * P;
        if (!use[0]) std::fill_n(base + kDepthChannel * P, P, 0.0);
        if (!use[1]) std::fill_n(base + kSketchChannel * P, P, 0.0);
        if (!use[2]) std::fill_n(base + kMotionXChannel * P, 2 * P, 0.0);
    }
    return m;
}

const TrainingPool& need(const std::optional<TrainingPool>& pool, const char* what,
                         Regime regime) {
    if (!pool || pool->size() == 0) {
        throw ConfigError(std::string("regime ") + to_string(regime) + " needs a non-empty " +
                          what + " corpus");
    }
    return *pool;
}

} // namespace

TrainBatch make_train_batch(const TrainingData& data, const TrainConfig& config,
                            const CaptionEncoder& captions, int timesteps, Rng& rng,
                            double image_fraction) {
    const Regime regime = config.regime;
    if (image_fraction > 0.0) need(data.images, "image_text", regime);
    if (image_fraction < 1.0) {
        if (regime == Regime::text_free) need(data.text_free, "text_free_video", regime);
        if (regime == Regime::semi_supervised) {
            need(data.paired, "video_text", regime);
            if (config.paired_fraction < 1.0) need(data.text_free, "text_free_video", regime);
        }
        if (regime == Regime::fully_supervised) need(data.paired, "video_text", regime);
    }

    TrainBatch batch;
    batch.items.reserve(config.batch_size);
    for (int i = 0; i < config.batch_size; ++i) {
        BatchItem item;
        const TrainingPool* pool = nullptr;
        bool use_text = false, use_image = false;
        if (uniform01(rng) < image_fraction) {
            pool = &*data.images;
            item.branch = Branch::content;
            use_text = use_image = true;
        } else {
            bool paired = regime == Regime::fully_supervised;
            if (regime == Regime::semi_supervised) paired = uniform01(rng) < config.paired_fraction;
            if (paired) {
                pool = &*data.paired;
                item.branch = Branch::paired;
                // paired clips alternate between text- and image-conditioned objectives
                use_text = uniform01(rng) < 0.5;
                use_image = !use_text;
            } else {
                pool = &*data.text_free;
                item.branch = Branch::motion;
                use_image = true;
            }
        }
        const size_t idx = rng() % pool->size();
        item.x0 = pool->videos[idx];
        const auto& caption = pool->captions[idx];
        if (use_text) {
            if (!caption) throw ConfigError("training item without a caption in a captioned branch");
            item.text_embedding = captions.encode(*caption);
        }
        if (use_image) item.image_source = item.x0.frame_video(center_frame_index(item.x0.frames()));

        const DropDecision drop = draw_drops(config.p_drop_text, config.p_drop_image, rng);
        if (drop.text) item.text_embedding.reset();
        if (drop.image) item.image_source.reset();

        if (config.model.structural() && !pool->structural.empty() &&
            uniform01(rng) < config.structural_prob) {
            item.structural = select_structural(pool->structural[idx], item.x0.frames() > 1, rng);
        }

        item.t = static_cast<int>(rng() % static_cast<std::uint64_t>(timesteps));
        item.noise = VideoTensor(item.x0.frames(), item.x0.channels(), item.x0.height(),
                                 item.x0.width(), 0.0, item.x0.frame_rate());
        fill_normal(item.noise.values(), rng);
        batch.items.push_back(std::move(item));
    }
    return batch;
}

TrainBatch make_train_batch(const TrainingData& data, const TrainConfig& config,
                            const CaptionEncoder& captions, int timesteps, Rng& rng) {
    return make_train_batch(data, config, captions, timesteps, rng, config.image_batch_fraction);
}

nlohmann::json to_json(const LossReport& r) {
    nlohmann::json j = {{"step", r.step},
                        {"base", r.base},
                        {"coherence", r.coherence},
                        {"total", r.total},
                        {"grad_norm", r.grad_norm}};
    for (int b = 0; b < kNumBranches; ++b) {
        const auto name = std::string(to_string(static_cast<Branch>(b)));
        j[name + "_count"] = r.branch_count[b];
        j[name + "_total"] = r.branch_count[b] ? nlohmann::json(r.branch_total[b]) : nlohmann::json();
    }
    return j;
}

LossReport loss_report_from_json(const nlohmann::json& j) {
    LossReport r;
    r.step = j.at("step");
    r.base = j.at("base");
    r.coherence = j.at("coherence");
    r.total = j.at("total");
    r.grad_norm = j.at("grad_norm");
    for (int b = 0; b < kNumBranches; ++b) {
        const auto name = std::string(to_string(static_cast<Branch>(b)));
        r.branch_count[b] = j.at(name + "_count");
        if (r.branch_count[b]) r.branch_total[b] = j.at(name + "_total");
    }
    return r;
}

namespace {

struct BatchResult {
    LossAndGrad mean;
    std::array<double, kNumBranches> branch_total{};
    std::array<int, kNumBranches> branch_count{};
};

BatchResult evaluate_batch(const DenoiserParams& params, const TrainBatch& batch,
                           const NoiseSchedule& sched, const TrainConfig& config,
                           std::int64_t step) {
    if (batch.items.empty()) throw ShapeError("empty training batch");
    const double lam = config.coherence_enabled ? config.lam : 0.0;
    const double w = 1.0 / static_cast<double>(batch.items.size());
    BatchResult r;
    for (const auto& [name, t] : params.tensors) r.mean.grads[name] = Tensor(t.shape(), 0.0);
    for (const BatchItem& item : batch.items) {
        LossAndGrad lg = forward_with_loss(params, item, sched, lam, config.coherence_space, w);
        if (!config.coherence_enabled) {
            lg.loss.coherence = 0.0;
            lg.loss.total = lg.loss.base;
        }
        if (!std::isfinite(lg.loss.total)) {
            throw NonFiniteError("non-finite loss at step " + std::to_string(step) + " in the " +
                                 to_string(item.branch) + " branch (t = " +
                                 std::to_string(item.t) + ")");
        }
        r.mean.loss.base += w * lg.loss.base;
        r.mean.loss.coherence += w * lg.loss.coherence;
        const int b = static_cast<int>(item.branch);
        r.branch_total[b] += lg.loss.total;
        r.branch_count[b] += 1;
        for (auto& [name, g] : lg.grads) {
            Tensor& acc = r.mean.grads.at(name);
            for (size_t k = 0; k < g.size(); ++k) acc[k] += g[k];
        }
    }
    r.mean.loss.total = total_loss(r.mean.loss.base, r.mean.loss.coherence, lam);
    for (int b = 0; b < kNumBranches; ++b)
        if (r.branch_count[b]) r.branch_total[b] /= r.branch_count[b];
    return r;
}

bool in_group(const std::string& name, ParamGroup group) {
    switch (group) {
    case ParamGroup::all: return true;
    case ParamGroup::temporal: return is_temporal_param(name);
    case ParamGroup::spatial: return !is_temporal_param(name);
    }
    return true;
}

} // namespace

LossAndGrad batch_loss(const DenoiserParams& params, const TrainBatch& batch,
                       const NoiseSchedule& sched, const TrainConfig& config) {
    return evaluate_batch(params, batch, sched, config, 0).mean;
}

LossReport train_step(DenoiserParams& params, AdamState& opt, const TrainBatch& batch,
                      const NoiseSchedule& sched, const TrainConfig& config, std::int64_t step,
                      ParamGroup group) {
    BatchResult r = evaluate_batch(params, batch, sched, config, step);
    LossReport rep;
    rep.step = step;
    rep.base = r.mean.loss.base;
    rep.coherence = r.mean.loss.coherence;
    rep.total = r.mean.loss.total;
    rep.branch_total = r.branch_total;
    rep.branch_count = r.branch_count;

    double sq = 0.0;
    for (const auto& [name, g] : r.mean.grads) {
        if (!in_group(name, group)) continue;
        for (double x : g.values()) sq += x * x;
    }
    rep.grad_norm = std::sqrt(sq);
    if (!std::isfinite(rep.grad_norm)) {
        throw NonFiniteError("non-finite gradient at step " + std::to_string(step));
    }
    const double clip = config.clip_norm > 0.0 && rep.grad_norm > config.clip_norm
                            ? config.clip_norm / rep.grad_norm
                            : 1.0;

    opt.t += 1;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(opt.t));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(opt.t));
    const double lr = config.learning_rate;
    for (auto& [name, p] : params.tensors) {
        if (!in_group(name, group)) continue;
        const Tensor& g = r.mean.grads.at(name);
        auto [mi, new_m] = opt.m.try_emplace(name, p.shape(), 0.0);
        auto [vi, new_v] = opt.v.try_emplace(name, p.shape(), 0.0);
        Tensor& m = mi->second;
        Tensor& v = vi->second;
        for (size_t k = 0; k < p.size(); ++k) {
            const double gk = clip * g[k];
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * gk;
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * gk * gk;
            const double update = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + config.adam_eps);
            p[k] -= lr * (update + config.weight_decay * p[k]);
        }
    }
    return rep;
}

Checkpoint make_train_checkpoint(const DenoiserParams& params, const AdamState& opt,
                                 const TrainConfig& config, std::int64_t step) {
    Checkpoint c = make_checkpoint(params, step);
    for (const auto& [name, t] : opt.m) c.arrays["adam.m/" + name] = t;
    for (const auto& [name, t] : opt.v) c.arrays["adam.v/" + name] = t;
    c.meta["adam_t"] = opt.t;
    c.meta["train_config"] = to_json(config);
    return c;
}

namespace {

std::string step_name(std::int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "step_%08lld.ckpt", static_cast<long long>(step));
    return buf;
}

// Everything except run length and checkpoint cadence must match to resume.
nlohmann::json resume_key(const TrainConfig& c) {
    nlohmann::json j = to_json(c);
    j.erase("total_steps");
    j.erase("checkpoint_every");
    return j;
}

std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir) {
    const auto ckdir = dir / "checkpoints";
    if (!std::filesystem::exists(ckdir)) return std::nullopt;
    std::optional<std::filesystem::path> best;
    for (const auto& e : std::filesystem::directory_iterator(ckdir)) {
        const auto name = e.path().filename().string();
        if (name.rfind("step_", 0) != 0 || e.path().extension() != ".ckpt") continue;
        if (!best || name > best->filename().string()) best = e.path();
    }
    return best;
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IntegrityError("cannot write " + tmp);
        os << text;
    }
    std::filesystem::rename(tmp, path);
}

} // namespace

TrainResult train(const TrainConfig& config, const TrainingData& data,
                  const TrainOutputs& outputs) {
    config.validate();
    const NoiseSchedule sched = config.schedule.make();
    const CaptionEncoder captions(config.model.embed_dim, config.codebook_seed);

    TrainResult result;
    result.params = init_denoiser(config.model, config.init_seed);
    AdamState opt;
    std::int64_t start = 0;

    const bool on_disk = !outputs.dir.empty();
    const auto curve_path = outputs.dir / "loss.jsonl";
    if (on_disk) std::filesystem::create_directories(outputs.dir / "checkpoints");

    if (on_disk && outputs.resume) {
        if (auto latest = latest_checkpoint(outputs.dir)) {
            const Checkpoint ck = read_checkpoint(*latest);
            if (!ck.meta.contains("train_config") ||
                resume_key(train_config_from_json(ck.meta.at("train_config"))) != resume_key(config)) {
                throw ConfigError("resume: checkpoint " + latest->string() +
                                  " was written by a different training configuration");
            }
            result.params = params_from_checkpoint(ck);
            for (const auto& [name, t] : ck.arrays) {
                if (name.rfind("adam.m/", 0) == 0) opt.m[name.substr(7)] = t;
                if (name.rfind("adam.v/", 0) == 0) opt.v[name.substr(7)] = t;
            }
            opt.t = ck.meta.at("adam_t").get<std::int64_t>();
            start = ck.meta.at("step").get<std::int64_t>();
            result.captioned_video_items = ck.meta.value("captioned_video_items", std::int64_t{0});
            result.captioned_image_items = ck.meta.value("captioned_image_items", std::int64_t{0});
        }
        // keep the curve up to the resume point
        std::ostringstream kept;
        if (std::ifstream is(curve_path); is) {
            std::string line;
            while (std::getline(is, line)) {
                if (line.empty()) continue;
                const auto j = nlohmann::json::parse(line);
                if (j.at("step").get<std::int64_t>() >= start) continue;
                kept << line << '\n';
                result.curve.push_back(loss_report_from_json(j));
            }
        }
        write_text_atomic(curve_path, kept.str());
    } else if (on_disk) {
        write_text_atomic(curve_path, "");
    }

    std::ofstream curve_out;
    if (on_disk) curve_out.open(curve_path, std::ios::app);

    auto save = [&](const std::filesystem::path& path, std::int64_t step) {
        Checkpoint ck = make_train_checkpoint(result.params, opt, config, step);
        ck.meta["captioned_video_items"] = result.captioned_video_items;
        ck.meta["captioned_image_items"] = result.captioned_image_items;
        write_checkpoint(path, ck);
    };

    const std::int64_t spatial_steps = config.spatial_steps();
    std::int64_t done_here = 0;
    for (std::int64_t step = start; step < config.total_steps; ++step) {
        if (outputs.stop_after && done_here >= *outputs.stop_after) return result;
        const bool spatial_stage = !config.joint && step < spatial_steps;
        const double fraction = config.joint ? config.image_batch_fraction : (spatial_stage ? 1.0 : 0.0);
        const ParamGroup group =
            config.joint ? ParamGroup::all : (spatial_stage ? ParamGroup::spatial : ParamGroup::temporal);

        Rng rng = make_rng(config.seed, 0x7472, static_cast<std::uint64_t>(step));
        const TrainBatch batch = make_train_batch(data, config, captions, sched.T, rng, fraction);
        for (const BatchItem& item : batch.items) {
            if (!item.text_embedding) continue;
            if (item.x0.frames() > 1) {
                if (config.regime == Regime::text_free) {
                    throw std::logic_error("text-free regime produced a captioned video item");
                }
                ++result.captioned_video_items;
            } else {
                ++result.captioned_image_items;
            }
        }

        const LossReport rep = train_step(result.params, opt, batch, sched, config, step, group);
        result.curve.push_back(rep);
        if (outputs.observe_batch) outputs.observe_batch(step, batch);
        if (on_disk) curve_out << to_json(rep).dump() << '\n' << std::flush;
        ++done_here;

        if (on_disk && config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0) {
            save(outputs.dir / "checkpoints" / step_name(step + 1), step + 1);
        }
    }
    if (on_disk) save(outputs.dir / "final.ckpt", config.total_steps);
    return result;
}

GradCheckResult grad_check(const ParamStore& params, const LossGradFn& fn,
                           const GradCheckOptions& opts) {
    ParamStore analytic = fn(params).second;
    Rng rng = make_rng(opts.seed, 0x6763);

    std::vector<std::pair<std::string, size_t>> probes;
    for (const auto& [name, t] : params) {
        if (t.size() == 0) continue;
        const int n = std::min<int>(opts.samples_per_tensor, static_cast<int>(t.size()));
        std::vector<size_t> picked;
        if (static_cast<size_t>(n) == t.size()) {
            for (size_t k = 0; k < t.size(); ++k) picked.push_back(k);
        } else {
            while (static_cast<int>(picked.size()) < n) {
                const size_t k = rng() % t.size();
                if (std::find(picked.begin(), picked.end(), k) == picked.end()) picked.push_back(k);
            }
        }
        for (size_t k : picked) probes.emplace_back(name, k);
    }

    if (opts.corrupt && !probes.empty()) {
        auto worst = std::max_element(probes.begin(), probes.end(), [&](const auto& a, const auto& b) {
            return std::abs(analytic.at(a.first)[a.second]) < std::abs(analytic.at(b.first)[b.second]);
        });
        double& g = analytic.at(worst->first)[worst->second];
        g = -g;
    }

    GradCheckResult res;
    ParamStore probe = params;
    for (const auto& [name, k] : probes) {
        double& x = probe.at(name)[k];
        const double saved = x;
        x = saved + opts.epsilon;
        const double up = fn(probe).first;
        x = saved - opts.epsilon;
        const double down = fn(probe).first;
        x = saved;
        const double numeric = (up - down) / (2.0 * opts.epsilon);
        const double a = analytic.at(name)[k];
        const double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), opts.floor);
        ++res.checked;
        if (rel > res.max_rel_error || res.worst_param.empty()) {
            res.max_rel_error = rel;
            res.worst_param = name;
            res.worst_index = k;
        }
    }
    return res;
}

GradCheckResult grad_check(const DenoiserParams& params, const TrainBatch& batch,
                           const NoiseSchedule& sched, const TrainConfig& config,
                           const GradCheckOptions& opts) {
    DenoiserParams work = params;
    LossGradFn fn = [&](const ParamStore& p) {
        work.tensors = p;
        LossAndGrad lg = batch_loss(work, batch, sched, config);
        return std::make_pair(lg.loss.total, std::move(lg.grads));
    };
    return grad_check(params.tensors, fn, opts);
}

} // namespace tfv
