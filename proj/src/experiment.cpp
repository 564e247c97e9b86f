#include "tfv/experiment.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "tfv/json_fields.hpp"
#include "tfv/random.hpp"

namespace tfv {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kHeldOutTag = 0x4e1d;
constexpr std::uint64_t kSampleTag = 0x5a3;

void progress(const std::string& msg) {
    if (!std::getenv("TFV_QUIET")) std::clog << "[tfv] " << msg << std::endl;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IntegrityError("cannot write " + tmp.string());
        os << text;
        if (!os) throw IntegrityError("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

json read_json_file(const fs::path& path, const char* what) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IntegrityError(std::string("missing ") + what + " " + path.string());
    try {
        json j;
        is >> j;
        return j;
    } catch (const json::exception& e) {
        throw IntegrityError(std::string("malformed ") + what + " " + path.string() + ": " + e.what());
    }
}

std::string item_name(size_t i, const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%05zu.%s", i, ext);
    return buf;
}

} // namespace

Corpus CorpusSection::make(CorpusKind kind) const {
    const size_t n = kind == CorpusKind::image_text        ? image_text
                     : kind == CorpusKind::text_free_video ? text_free_video
                                                           : video_text;
    return make_corpus(kind, n, seed, dims);
}

Corpus CorpusSection::make_held_out() const {
    return make_video_text_pairs(held_out, mix_seed(seed, kHeldOutTag), dims);
}

const char* to_string(StructuralCondition s) {
    switch (s) {
    case StructuralCondition::none: return "none";
    case StructuralCondition::depth: return "depth";
    case StructuralCondition::sketch: return "sketch";
    case StructuralCondition::motion: return "motion";
    }
    return "?";
}

StructuralCondition parse_structural_condition(const std::string& s) {
    for (auto k : {StructuralCondition::none, StructuralCondition::depth, StructuralCondition::sketch,
                   StructuralCondition::motion})
        if (s == to_string(k)) return k;
    throw ConfigError("unknown structural condition '" + s + "' (none, depth, sketch, motion)");
}

void ExperimentConfig::validate() const {
    if (name.empty()) throw ConfigError("name: must not be empty");
    if (out.empty()) throw ConfigError("out: must not be empty");
    const CorpusDims& d = corpus.dims;
    if (d.channels != 3) throw ConfigError("corpus.channels: sprites are rendered in RGB (3)");
    if (d.frames < 2) throw ConfigError("corpus.frames: videos need at least 2 frames");
    if (d.height < 8 || d.width < 8) throw ConfigError("corpus.height/width: at least 8 pixels");
    if (!(d.frame_rate > 0.0)) throw ConfigError("corpus.frame_rate: must be positive");

    train.validate();
    if (train.model.video_channels != d.channels) {
        throw ConfigError("train.model.video_channels: must equal corpus.channels");
    }
    try {
        train.model.validate(d.height, d.width);
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("train.model: ") + e.what());
    }

    const bool images_needed = !train.joint || train.image_batch_fraction > 0.0;
    const bool videos_needed = !train.joint || train.image_batch_fraction < 1.0;
    if (images_needed && corpus.image_text == 0) {
        throw ConfigError("corpus.image_text: the content branch needs image-text pairs");
    }
    if (videos_needed) {
        if (train.regime != Regime::fully_supervised && corpus.text_free_video == 0) {
            throw ConfigError(std::string("corpus.text_free_video: regime ") + to_string(train.regime) +
                              " needs text-free videos");
        }
        if (train.regime != Regime::text_free && corpus.video_text == 0) {
            throw ConfigError(std::string("corpus.video_text: regime ") + to_string(train.regime) +
                              " needs captioned videos");
        }
    }

    const SamplerConfig& s = sample.sampler;
    if (s.num_steps < 1 || s.num_steps > train.schedule.T) {
        throw ConfigError("sample.num_steps: must lie in [1, train.schedule.T]");
    }
    if (!(s.eta >= 0.0 && s.eta <= 1.0)) throw ConfigError("sample.eta: must lie in [0, 1]");
    if (!(s.guidance_scale >= 0.0)) throw ConfigError("sample.guidance_scale: must be non-negative");
    const bool explicit_prompts = !sample.prompts.empty() || !sample.prompt_file.empty();
    if (!explicit_prompts) {
        if (sample.count < 1) throw ConfigError("sample.count: must be positive");
        if (sample.count > corpus.held_out) {
            throw ConfigError("sample.count: exceeds corpus.held_out");
        }
    }
    if (sample.structural != StructuralCondition::none) {
        if (explicit_prompts) {
            throw ConfigError("sample.structural: conditions come from held-out items, so prompts must "
                              "not be given explicitly");
        }
        if (!train.model.structural()) {
            throw ConfigError("sample.structural: train.model has no structural input channels");
        }
    }
    if (sample.image_condition && explicit_prompts) {
        throw ConfigError("sample.image_condition: needs held-out prompts, not explicit ones");
    }
}

json to_json(const ExperimentConfig& c) {
    json prompts = json::array();
    for (const CaptionSpec& p : c.sample.prompts) prompts.push_back(to_record(p));
    const CorpusDims& d = c.corpus.dims;
    return {
        {"name", c.name},
        {"out", c.out.string()},
        {"corpus",
         {{"seed", c.corpus.seed},
          {"frames", d.frames},
          {"channels", d.channels},
          {"height", d.height},
          {"width", d.width},
          {"frame_rate", d.frame_rate},
          {"image_text", c.corpus.image_text},
          {"text_free_video", c.corpus.text_free_video},
          {"video_text", c.corpus.video_text},
          {"held_out", c.corpus.held_out},
          {"conditions", c.corpus.conditions}}},
        {"train", to_json(c.train)},
        {"sample",
         {{"num_steps", c.sample.sampler.num_steps},
          {"eta", c.sample.sampler.eta},
          {"guidance_scale", c.sample.sampler.guidance_scale},
          {"seed", c.sample.sampler.seed},
          {"prompts", prompts},
          {"prompt_file", c.sample.prompt_file.string()},
          {"count", c.sample.count},
          {"structural", to_string(c.sample.structural)},
          {"image_condition", c.sample.image_condition},
          {"export_grids", c.sample.export_grids}}},
        {"eval",
         {{"frame_consistency", c.eval.frame_consistency},
          {"depth_error", c.eval.depth_error},
          {"sketch_error", c.eval.sketch_error},
          {"epe", c.eval.epe},
          {"frechet_distance", c.eval.frechet_distance},
          {"caption_accuracy", c.eval.caption_accuracy},
          {"embedder_seed", c.eval.embedder_seed}}},
    };
}

ExperimentConfig experiment_config_from_json(const json& j, const fs::path& base_dir) {
    ExperimentConfig c;
    JsonFields top(j, "");
    top.read("name", c.name);
    std::string out;
    if (top.read("out", out)) c.out = out;

    if (const json* cj = top.child("corpus")) {
        JsonFields f(*cj, "corpus");
        CorpusDims& d = c.corpus.dims;
        f.read("seed", c.corpus.seed);
        f.read("frames", d.frames);
        f.read("channels", d.channels);
        f.read("height", d.height);
        f.read("width", d.width);
        f.read("frame_rate", d.frame_rate);
        f.read("image_text", c.corpus.image_text);
        f.read("text_free_video", c.corpus.text_free_video);
        f.read("video_text", c.corpus.video_text);
        f.read("held_out", c.corpus.held_out);
        f.read("conditions", c.corpus.conditions);
        f.finish();
    }
    if (const json* tj = top.child("train")) c.train = train_config_from_json(*tj, "train");

    if (const json* sj = top.child("sample")) {
        JsonFields f(*sj, "sample");
        SamplerConfig& s = c.sample.sampler;
        f.read("num_steps", s.num_steps);
        f.read("eta", s.eta);
        f.read("guidance_scale", s.guidance_scale);
        f.read("seed", s.seed);
        if (const json* pj = f.child("prompts")) {
            if (!pj->is_array()) throw ConfigError("sample.prompts: expected an array of caption records");
            for (size_t i = 0; i < pj->size(); ++i) {
                const std::string where = "sample.prompts[" + std::to_string(i) + "]";
                const auto rec = JsonFields::convert<std::string>(pj->at(i), where);
                try {
                    c.sample.prompts.push_back(parse_caption_record(rec));
                } catch (const std::exception& e) {
                    throw ConfigError(where + ": " + e.what());
                }
            }
        }
        std::string file;
        if (f.read("prompt_file", file) && !file.empty()) {
            fs::path p = file;
            c.sample.prompt_file = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
        }
        f.read("count", c.sample.count);
        f.read_enum("structural", c.sample.structural, parse_structural_condition);
        f.read("image_condition", c.sample.image_condition);
        f.read("export_grids", c.sample.export_grids);
        f.finish();
    }

    if (const json* ej = top.child("eval")) {
        JsonFields f(*ej, "eval");
        f.read("frame_consistency", c.eval.frame_consistency);
        f.read("depth_error", c.eval.depth_error);
        f.read("sketch_error", c.eval.sketch_error);
        f.read("epe", c.eval.epe);
        f.read("frechet_distance", c.eval.frechet_distance);
        f.read("caption_accuracy", c.eval.caption_accuracy);
        f.read("embedder_seed", c.eval.embedder_seed);
        f.finish();
    }
    top.finish();
    return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path.string());
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
    }
    ExperimentConfig c = experiment_config_from_json(j, path.parent_path());
    if (!c.sample.prompt_file.empty()) {
        try {
            const auto extra = read_prompt_file(c.sample.prompt_file);
            c.sample.prompts.insert(c.sample.prompts.end(), extra.begin(), extra.end());
            // the prompts now live inline, so the resolved config round-trips
            c.sample.prompt_file.clear();
        } catch (const std::exception& e) {
            throw ConfigError(std::string("sample.prompt_file: ") + e.what());
        }
    }
    return c;
}

std::vector<CaptionSpec> read_prompt_file(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open prompt file " + path.string());
    std::vector<CaptionSpec> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        try {
            out.push_back(parse_caption_record(line.substr(first)));
        } catch (const std::exception& e) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

void write_prompt_file(const fs::path& path, const std::vector<CaptionSpec>& prompts) {
    std::string text;
    for (const CaptionSpec& p : prompts) text += to_record(p) + "\n";
    write_text_atomic(path, text);
}

fs::path RunLayout::corpus_dir(CorpusKind kind) const { return root / "corpus" / to_string(kind); }
fs::path RunLayout::held_out_dir() const { return root / "corpus" / "held_out"; }
fs::path RunLayout::train_dir() const { return root / "train"; }
fs::path RunLayout::final_checkpoint() const { return train_dir() / "final.ckpt"; }
fs::path RunLayout::samples_dir(const std::string& label) const { return root / "samples" / label; }
fs::path RunLayout::eval_path(const std::string& label) const {
    return root / "eval" / (label + ".json");
}

fs::path resolve_output_dir(const fs::path& out) {
    if (out.is_absolute()) return out;
    if (const char* rootdir = std::getenv(kOutRootEnv); rootdir && *rootdir) return fs::path(rootdir) / out;
    return out;
}

RunLock::RunLock(const fs::path& root) : path_(root / ".lock") {
    fs::create_directories(root);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        throw IntegrityError("run directory " + root.string() +
                             " is locked by another process (remove " + path_.string() +
                             " if it is stale)");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

RunLock::~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

void prepare_run_dir(const RunLayout& layout, const ExperimentConfig& c) {
    fs::create_directories(layout.root);
    const fs::path run = layout.root / "run.json";
    const json cfg = to_json(c);
    if (fs::exists(run)) {
        const json old = read_json_file(run, "run record");
        if (old.value("layout_version", 0) != kRunLayoutVersion) {
            throw IntegrityError(run.string() + ": unsupported layout version");
        }
        if (old.at("config").at("corpus") != cfg.at("corpus")) {
            throw ConfigError("corpus: " + layout.root.string() +
                              " already holds a run with a different corpus section");
        }
    }
    write_text_atomic(run, json{{"format", "tfv-run"}, {"layout_version", kRunLayoutVersion},
                                {"config", cfg}}
                               .dump(2) +
                               "\n");
}

namespace {

bool same_corpus(const Corpus& a, const Corpus& b) {
    if (a.kind != b.kind || a.seed != b.seed || !(a.dims == b.dims) || a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        if (!(a.items[i].spec == b.items[i].spec) ||
            a.items[i].caption_available != b.items[i].caption_available) {
            return false;
        }
    }
    return true;
}

void ensure_corpus(const fs::path& dir, const Corpus& want, bool conditions) {
    if (fs::exists(dir / "manifest")) {
        try {
            if (same_corpus(read_corpus(dir), want)) {
                progress("corpus " + dir.string() + " up to date");
                return;
            }
        } catch (const IntegrityError&) {
            // rewritten below
        }
        fs::remove_all(dir);
    }
    progress("writing " + std::to_string(want.size()) + " items to " + dir.string());
    write_corpus(dir, want, conditions);
}

std::vector<CorpusKind> training_kinds(const ExperimentConfig& c) {
    std::vector<CorpusKind> kinds;
    if (c.corpus.image_text > 0) kinds.push_back(CorpusKind::image_text);
    if (c.corpus.text_free_video > 0) kinds.push_back(CorpusKind::text_free_video);
    if (c.corpus.video_text > 0) kinds.push_back(CorpusKind::video_text);
    return kinds;
}

} // namespace

void cmd_gen_data(const ExperimentConfig& c, const RunLayout& layout) {
    c.validate();
    for (CorpusKind kind : training_kinds(c)) {
        ensure_corpus(layout.corpus_dir(kind), c.corpus.make(kind), c.corpus.conditions);
    }
    if (c.corpus.held_out > 0) ensure_corpus(layout.held_out_dir(), c.corpus.make_held_out(), true);
}

TrainingData load_training_data(const ExperimentConfig& c, const RunLayout* layout) {
    const bool structural = c.train.model.structural();
    auto load = [&](CorpusKind kind) -> std::optional<TrainingPool> {
        const size_t n = kind == CorpusKind::image_text        ? c.corpus.image_text
                         : kind == CorpusKind::text_free_video ? c.corpus.text_free_video
                                                               : c.corpus.video_text;
        if (n == 0) return std::nullopt;
        const Corpus want = c.corpus.make(kind);
        if (!layout) return make_training_pool(want, structural);
        const fs::path dir = layout->corpus_dir(kind);
        if (!fs::exists(dir / "manifest")) {
            throw IntegrityError("missing corpus " + dir.string() + " (run gen-data first)");
        }
        const Corpus have = read_corpus(dir);
        if (!same_corpus(have, want)) {
            throw IntegrityError("corpus " + dir.string() + " does not match the corpus section (run gen-data)");
        }
        TrainingPool pool = make_training_pool(have, structural);
        // training reads the stored values, not a fresh render
        for (size_t i = 0; i < have.size(); ++i) pool.videos[i] = load_item(dir, i);
        return pool;
    };
    TrainingData data;
    data.images = load(CorpusKind::image_text);
    data.text_free = load(CorpusKind::text_free_video);
    data.paired = load(CorpusKind::video_text);
    return data;
}

TrainResult cmd_train(const ExperimentConfig& c, const RunLayout& layout) {
    c.validate();
    const fs::path final_path = layout.final_checkpoint();
    if (fs::exists(final_path)) {
        const Checkpoint ck = read_checkpoint(final_path);
        if (ck.meta.contains("train_config") && ck.meta.at("train_config") == to_json(c.train)) {
            progress("training already complete: " + final_path.string());
            TrainResult r;
            r.params = params_from_checkpoint(ck);
            r.curve = read_loss_curve(layout.train_dir() / "loss.jsonl");
            r.captioned_video_items = ck.meta.value("captioned_video_items", std::int64_t{0});
            r.captioned_image_items = ck.meta.value("captioned_image_items", std::int64_t{0});
            return r;
        }
    }
    const TrainingData data = load_training_data(c, &layout);
    progress("training " + std::to_string(c.train.total_steps) + " steps (" +
             to_string(c.train.regime) + ", " + (c.train.joint ? "joint" : "two-stage") + ")");
    TrainOutputs outs;
    outs.dir = layout.train_dir();
    outs.resume = true;
    return train(c.train, data, outs);
}

SampleSet generate_samples(const ExperimentConfig& c, const DenoiserParams& params,
                           const Corpus& held_out) {
    const CorpusDims& d = c.corpus.dims;
    const DenoiserConfig& m = params.config;
    if (m.video_channels != d.channels) {
        throw ConfigError("checkpoint: model produces " + std::to_string(m.video_channels) +
                          " channels but corpus.channels is " + std::to_string(d.channels));
    }
    try {
        m.validate(d.height, d.width);
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("checkpoint: incompatible with corpus dimensions: ") + e.what());
    }
    if (c.sample.structural != StructuralCondition::none && !m.structural()) {
        throw ConfigError("sample.structural: the checkpoint's model has no structural input channels");
    }

    SampleSet s;
    s.structural = c.sample.structural;
    if (!c.sample.prompts.empty()) {
        s.prompts = c.sample.prompts;
    } else {
        if (c.sample.count > held_out.size()) throw ConfigError("sample.count: exceeds the held-out corpus");
        for (size_t i = 0; i < c.sample.count; ++i) {
            s.prompts.push_back(held_out.items[i].spec.caption);
            s.references.push_back(i);
        }
    }

    const NoiseSchedule sched = c.train.schedule.make();
    const CaptionEncoder enc(m.embed_dim, c.train.codebook_seed);
    const DenoiseFn fn = make_denoise_fn(params);
    const VideoShape shape{d.frames, d.channels, d.height, d.width};
    for (size_t i = 0; i < s.prompts.size(); ++i) {
        ConditionBundle cond;
        cond.text_embedding = enc.encode(s.prompts[i]);
        if (!s.references.empty() &&
            (c.sample.image_condition || c.sample.structural != StructuralCondition::none)) {
            const size_t ref = s.references[i];
            const VideoTensor gt = held_out.render(ref);
            if (c.sample.image_condition) cond.image_embedding = encode_center_frame(params.tensors, gt);
            if (c.sample.structural != StructuralCondition::none) {
                cond.structural = structural_maps_for(held_out.items[ref].spec, gt,
                                                      c.sample.structural == StructuralCondition::depth,
                                                      c.sample.structural == StructuralCondition::sketch,
                                                      c.sample.structural == StructuralCondition::motion);
            }
        }
        SamplerConfig sc = c.sample.sampler;
        sc.seed = mix_seed(c.sample.sampler.seed, kSampleTag, i);
        VideoTensor v = ddim_sample(fn, cond, shape, sched, sc);
        for (double& x : v.values()) x = std::clamp(x, -1.0, 1.0);
        v.set_frame_rate(d.frame_rate);
        s.videos.push_back(round_to_float32(v));
    }
    return s;
}

void write_samples(const fs::path& dir, const SampleSet& s, bool export_grids) {
    fs::create_directories(dir);
    json items = json::array();
    for (size_t i = 0; i < s.videos.size(); ++i) {
        const std::string name = item_name(i, "vid");
        write_vid(dir / name, s.videos[i]);
        json it{{"file", name},
                {"prompt", to_record(s.prompts[i])},
                {"checksum", checksum_hex(file_checksum(dir / name))}};
        it["reference"] = s.references.empty() ? json(nullptr) : json(s.references[i]);
        items.push_back(it);
        if (export_grids) {
            fs::create_directories(dir / "grids");
            write_ppm_grid(dir / "grids" / item_name(i, "ppm"), s.videos[i]);
        }
    }
    write_prompt_file(dir / "prompts.txt", s.prompts);
    json body{{"format", "tfv-samples"},
              {"version", 1},
              {"structural", to_string(s.structural)},
              {"items", items}};
    const std::string text = body.dump();
    body["checksum"] = checksum_hex(fnv1a64(text.data(), text.size()));
    write_text_atomic(dir / "manifest.json", body.dump(2) + "\n");
}

SampleSet read_samples(const fs::path& dir) {
    json j = read_json_file(dir / "manifest.json", "sample manifest");
    if (j.value("format", std::string()) != "tfv-samples" || j.value("version", 0) != 1) {
        throw IntegrityError(dir.string() + ": not a version-1 sample directory");
    }
    const std::string stored = j.value("checksum", std::string());
    j.erase("checksum");
    const std::string text = j.dump();
    if (stored != checksum_hex(fnv1a64(text.data(), text.size()))) {
        throw IntegrityError(dir.string() + "/manifest.json: checksum mismatch");
    }
    SampleSet s;
    s.structural = parse_structural_condition(j.at("structural").get<std::string>());
    bool refs = true;
    for (const json& it : j.at("items")) {
        const fs::path file = dir / it.at("file").get<std::string>();
        if (!fs::exists(file)) throw IntegrityError("missing sample " + file.string());
        if (checksum_hex(file_checksum(file)) != it.at("checksum").get<std::string>()) {
            throw IntegrityError("sample " + file.string() + " fails its checksum");
        }
        s.videos.push_back(read_vid(file));
        s.prompts.push_back(parse_caption_record(it.at("prompt").get<std::string>()));
        if (it.at("reference").is_null()) {
            refs = false;
        } else {
            s.references.push_back(it.at("reference").get<size_t>());
        }
    }
    if (!refs) s.references.clear();
    return s;
}

namespace {

DenoiserParams load_params_for(const ExperimentConfig& c, const fs::path& checkpoint) {
    if (!fs::exists(checkpoint)) throw IntegrityError("missing checkpoint " + checkpoint.string());
    const Checkpoint ck = read_checkpoint(checkpoint);
    if (ck.meta.contains("train_config")) {
        const TrainConfig tc = train_config_from_json(ck.meta.at("train_config"));
        if (!(tc.model == c.train.model)) {
            throw ConfigError("train.model: differs from the model stored in " + checkpoint.string());
        }
        if (tc.codebook_seed != c.train.codebook_seed) {
            throw ConfigError("train.codebook_seed: differs from the value stored in " + checkpoint.string());
        }
        if (tc.schedule.T != c.train.schedule.T || tc.schedule.beta_start != c.train.schedule.beta_start ||
            tc.schedule.beta_end != c.train.schedule.beta_end) {
            throw ConfigError("train.schedule: differs from the schedule stored in " + checkpoint.string());
        }
    }
    return params_from_checkpoint(ck);
}

Corpus load_held_out(const ExperimentConfig& c, const RunLayout& layout) {
    const fs::path dir = layout.held_out_dir();
    if (!fs::exists(dir / "manifest")) {
        throw IntegrityError("missing held-out corpus " + dir.string() + " (run gen-data first)");
    }
    Corpus have = read_corpus(dir);
    if (!same_corpus(have, c.corpus.make_held_out())) {
        throw IntegrityError("held-out corpus " + dir.string() + " does not match the corpus section");
    }
    return have;
}

} // namespace

SampleSet cmd_sample(const ExperimentConfig& c, const RunLayout& layout, const fs::path& checkpoint,
                     const std::string& label) {
    c.validate();
    const DenoiserParams params = load_params_for(c, checkpoint);
    const Corpus held = load_held_out(c, layout);
    progress("sampling " + std::to_string(c.sample.prompts.empty() ? c.sample.count : c.sample.prompts.size()) +
             " videos into " + layout.samples_dir(label).string());
    const SampleSet s = generate_samples(c, params, held);
    const fs::path dir = layout.samples_dir(label);
    if (fs::exists(dir)) fs::remove_all(dir);
    write_samples(dir, s, c.sample.export_grids);
    return s;
}

SampleSet ground_truth_samples(const ExperimentConfig& c, const Corpus& held_out) {
    SampleSet s;
    const size_t n = c.sample.prompts.empty() ? std::min(c.sample.count, held_out.size()) : held_out.size();
    for (size_t i = 0; i < n; ++i) {
        s.videos.push_back(round_to_float32(held_out.render(i)));
        s.prompts.push_back(held_out.items[i].spec.caption);
        s.references.push_back(i);
    }
    return s;
}

MetricsReport evaluate_samples(const SampleSet& s, const Corpus& held, const EvalSection& e,
                               const std::string& label) {
    MetricsReport r;
    r.label = label;
    const size_t n = s.videos.size();
    if (n == 0) throw RangeError("evaluate: no samples");
    if (s.prompts.size() != n) throw ShapeError("evaluate: prompts and videos differ in number");
    const bool all_video = std::all_of(s.videos.begin(), s.videos.end(),
                                       [](const VideoTensor& v) { return v.frames() >= 2; });
    const bool refs = s.references.size() == n;
    const auto count = [&](const char* k, std::int64_t v) { r.counts[k] = v; };

    std::optional<Embedder> embedder;
    auto emb = [&]() -> const Embedder& {
        if (!embedder) embedder = make_reference_embedder(e.embedder_seed, s.videos[0].channels());
        return *embedder;
    };

    if (e.frame_consistency && all_video) {
        r.frame_consistency = frame_consistency(s.videos, emb());
        count("frame_consistency", static_cast<std::int64_t>(n));
    }
    if (refs && (e.depth_error || e.sketch_error || e.epe)) {
        std::vector<Tensor> depth, sketch, motion;
        for (size_t i = 0; i < n; ++i) {
            const size_t ref = s.references[i];
            if (ref >= held.size()) throw RangeError("evaluate: sample reference outside the held-out corpus");
            const VideoTensor gt = held.render(ref);
            const CorpusDims& d = held.dims;
            if (e.depth_error) depth.push_back(depth_maps(gt));
            if (e.sketch_error) sketch.push_back(sketch_maps(gt));
            if (e.epe) motion.push_back(motion_vector_maps(held.items[ref].spec, d.frames, d.height, d.width));
        }
        if (e.depth_error) {
            r.depth_error = depth_error(s.videos, depth);
            count("depth_error", static_cast<std::int64_t>(n));
        }
        if (e.sketch_error) {
            r.sketch_error = sketch_error(s.videos, sketch);
            count("sketch_error", static_cast<std::int64_t>(n));
        }
        if (e.epe && all_video) {
            try {
                const EpeResult ep = epe(s.videos, motion);
                r.epe = ep.epe;
                count("epe", ep.items);
            } catch (const RangeError&) {
                progress("epe: every sample was excluded (no detectable sprite)");
            }
            count("epe_excluded", static_cast<std::int64_t>(n) - r.counts["epe"]);
        }
    }
    if (e.frechet_distance && n >= 2 && held.size() >= 2) {
        std::vector<VideoTensor> ref;
        for (size_t i = 0; i < held.size(); ++i) ref.push_back(held.render(i));
        r.frechet_distance = frechet_feature_distance(s.videos, ref, emb());
        count("frechet_distance", static_cast<std::int64_t>(n));
        count("frechet_reference", static_cast<std::int64_t>(ref.size()));
    }
    if (e.caption_accuracy) {
        const CaptionAccuracy a = caption_accuracy(s.videos, s.prompts);
        r.caption_accuracy = a.accuracy;
        r.caption_breakdown = a;
        count("caption_accuracy", static_cast<std::int64_t>(n));
    }
    if (r.counts.count("epe") && r.counts["epe"] == 0) r.counts.erase("epe");
    return r;
}

MetricsReport cmd_eval(const ExperimentConfig& c, const RunLayout& layout, const fs::path& samples_dir,
                       const std::string& label) {
    c.validate();
    const Corpus held = load_held_out(c, layout);
    const SampleSet s = samples_dir.empty() ? ground_truth_samples(c, held) : read_samples(samples_dir);
    progress("evaluating " + std::to_string(s.videos.size()) + " videos as '" + label + "'");
    const MetricsReport r = evaluate_samples(s, held, c.eval, label);
    fs::create_directories(layout.eval_path(label).parent_path());
    write_report(layout.eval_path(label), r);
    return r;
}

namespace {

struct MetricRow {
    const char* name;
    std::optional<double> (*get)(const MetricsReport&);
};

std::optional<double> breakdown(const MetricsReport& r, int k) {
    if (!r.caption_breakdown || r.caption_breakdown->counts[k] == 0) return std::nullopt;
    return r.caption_breakdown->per_attribute[k];
}

const std::vector<MetricRow>& metric_rows() {
    static const std::vector<MetricRow> rows = {
        {"frame_consistency", [](const MetricsReport& r) { return r.frame_consistency; }},
        {"depth_error", [](const MetricsReport& r) { return r.depth_error; }},
        {"sketch_error", [](const MetricsReport& r) { return r.sketch_error; }},
        {"epe", [](const MetricsReport& r) { return r.epe; }},
        {"frechet_distance", [](const MetricsReport& r) { return r.frechet_distance; }},
        {"caption_accuracy", [](const MetricsReport& r) { return r.caption_accuracy; }},
        {"caption_shape", [](const MetricsReport& r) { return breakdown(r, 0); }},
        {"caption_color", [](const MetricsReport& r) { return breakdown(r, 1); }},
        {"caption_direction", [](const MetricsReport& r) { return breakdown(r, 2); }},
        {"caption_speed", [](const MetricsReport& r) { return breakdown(r, 3); }},
    };
    return rows;
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(5) << v;
    return os.str();
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char ch : s) {
        switch (ch) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += ch;
        }
    }
    return out;
}

} // namespace

std::string report_table(const std::vector<MetricsReport>& reports) {
    std::vector<std::vector<std::string>> cells;
    cells.push_back({"metric"});
    for (const MetricsReport& r : reports) cells[0].push_back(r.label);
    for (const MetricRow& row : metric_rows()) {
        std::vector<std::string> line{row.name};
        bool any = false;
        for (const MetricsReport& r : reports) {
            const auto v = row.get(r);
            any = any || v.has_value();
            line.push_back(v ? fmt(*v) : "-");
        }
        if (any) cells.push_back(line);
    }
    std::vector<size_t> width(cells[0].size(), 0);
    for (const auto& line : cells)
        for (size_t k = 0; k < line.size(); ++k) width[k] = std::max(width[k], line[k].size());
    std::ostringstream os;
    for (size_t li = 0; li < cells.size(); ++li) {
        for (size_t k = 0; k < cells[li].size(); ++k) {
            if (k) os << "  ";
            os << std::left << std::setw(static_cast<int>(width[k])) << cells[li][k];
        }
        os << '\n';
        if (li == 0) {
            size_t total = 0;
            for (size_t w : width) total += w;
            os << std::string(total + 2 * (width.size() - 1), '-') << '\n';
        }
    }
    return os.str();
}

std::string report_bar_svg(const std::vector<MetricsReport>& reports, const std::string& metric) {
    const auto it = std::find_if(metric_rows().begin(), metric_rows().end(),
                                 [&](const MetricRow& r) { return metric == r.name; });
    if (it == metric_rows().end()) throw ConfigError("unknown metric '" + metric + "'");
    double top = 0.0;
    for (const MetricsReport& r : reports)
        if (auto v = it->get(r)) top = std::max(top, std::abs(*v));
    if (top == 0.0) top = 1.0;
    const int bar = 60, gap = 30, left = 50, plot_h = 200, top_pad = 40;
    const int width = left + static_cast<int>(reports.size()) * (bar + gap) + gap;
    const int height = top_pad + plot_h + 60;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
       << xml_escape(metric) << "</text>\n";
    const int base_y = top_pad + plot_h;
    os << "<line x1=\"" << left << "\" y1=\"" << base_y << "\" x2=\"" << width - 10 << "\" y2=\"" << base_y
       << "\" stroke=\"black\"/>\n";
    for (size_t i = 0; i < reports.size(); ++i) {
        const int x = left + gap / 2 + static_cast<int>(i) * (bar + gap);
        const auto v = it->get(reports[i]);
        if (v) {
            const int h = static_cast<int>(std::round(std::abs(*v) / top * plot_h));
            os << "<rect x=\"" << x << "\" y=\"" << base_y - h << "\" width=\"" << bar << "\" height=\"" << h
               << "\" fill=\"#4878a8\"/>\n";
            os << "<text x=\"" << x + bar / 2 << "\" y=\"" << base_y - h - 4 << "\" text-anchor=\"middle\">"
               << fmt(*v) << "</text>\n";
        }
        os << "<text x=\"" << x + bar / 2 << "\" y=\"" << base_y + 16 << "\" text-anchor=\"middle\">"
           << xml_escape(reports[i].label) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::string loss_curve_svg(const std::vector<std::pair<std::string, std::vector<LossReport>>>& curves) {
    static const char* colors[] = {"#4878a8", "#d0703c", "#5a9e5a", "#b04a6a", "#7a62a8", "#8a8a3a"};
    const int W = 640, H = 360, left = 60, right = 150, top = 30, bottom = 40;
    std::int64_t max_step = 1;
    double max_loss = 0.0;
    std::vector<std::vector<std::pair<double, double>>> smoothed;
    for (const auto& [label, curve] : curves) {
        auto& pts = smoothed.emplace_back();
        const size_t win = std::max<size_t>(1, curve.size() / 50);
        double acc = 0.0;
        for (size_t i = 0; i < curve.size(); ++i) {
            acc += curve[i].total;
            if (i >= win) acc -= curve[i - win].total;
            const double mean = acc / static_cast<double>(std::min(i + 1, win));
            if ((i + 1) % win == 0 || i + 1 == curve.size()) {
                pts.emplace_back(static_cast<double>(curve[i].step), mean);
                max_loss = std::max(max_loss, mean);
            }
            max_step = std::max(max_step, curve[i].step);
        }
    }
    if (max_loss == 0.0) max_loss = 1.0;
    const double pw = W - left - right, ph = H - top - bottom;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << left + pw / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">training loss</text>\n";
    os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
       << "\" fill=\"none\" stroke=\"black\"/>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << top + 10 << "\" text-anchor=\"end\">" << fmt(max_loss)
       << "</text>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << top + ph << "\" text-anchor=\"end\">0</text>\n";
    os << "<text x=\"" << left + pw << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"end\">step " << max_step
       << "</text>\n";
    for (size_t c = 0; c < curves.size(); ++c) {
        const char* color = colors[c % 6];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [x, y] : smoothed[c]) {
            os << left + x / static_cast<double>(max_step) * pw << ',' << top + ph - y / max_loss * ph << ' ';
        }
        os << "\"/>\n";
        os << "<text x=\"" << left + pw + 10 << "\" y=\"" << top + 14 + 16 * static_cast<int>(c) << "\" fill=\""
           << color << "\">" << xml_escape(curves[c].first) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::vector<LossReport> read_loss_curve(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw IntegrityError("missing loss curve " + path.string());
    std::vector<LossReport> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(loss_report_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw IntegrityError("malformed loss record in " + path.string() + ": " + e.what());
        }
    }
    return out;
}

void cmd_report(const std::vector<MetricsReport>& reports,
                const std::vector<std::pair<std::string, std::vector<LossReport>>>& curves,
                const fs::path& out_dir) {
    fs::create_directories(out_dir);
    if (!reports.empty()) {
        write_text_atomic(out_dir / "report.txt", report_table(reports));
        for (const MetricRow& row : metric_rows()) {
            if (std::none_of(reports.begin(), reports.end(),
                             [&](const MetricsReport& r) { return row.get(r).has_value(); })) {
                continue;
            }
            write_text_atomic(out_dir / (std::string(row.name) + ".svg"), report_bar_svg(reports, row.name));
        }
    }
    if (!curves.empty()) write_text_atomic(out_dir / "loss.svg", loss_curve_svg(curves));
}

void write_ppm_grid(const fs::path& path, const VideoTensor& v, int scale) {
    if (v.channels() != 3) throw ShapeError("write_ppm_grid expects RGB frames");
    const int F = v.frames(), H = v.height(), W = v.width();
    const int gw = F * W * scale, gh = H * scale;
    std::string pixels(static_cast<size_t>(gw) * gh * 3, '\0');
    for (int f = 0; f < F; ++f)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                for (int c = 0; c < 3; ++c) {
                    const double u = std::clamp((v.at(f, c, y, x) + 1.0) * 0.5, 0.0, 1.0);
                    const char byte = static_cast<char>(static_cast<unsigned char>(std::lround(u * 255.0)));
                    for (int dy = 0; dy < scale; ++dy)
                        for (int dx = 0; dx < scale; ++dx) {
                            const size_t px = static_cast<size_t>(y * scale + dy) * gw + (f * W + x) * scale + dx;
                            pixels[px * 3 + c] = byte;
                        }
                }
    std::ostringstream header;
    header << "P6\n" << gw << ' ' << gh << "\n255\n";
    write_text_atomic(path, header.str() + pixels);
}

} // namespace tfv
