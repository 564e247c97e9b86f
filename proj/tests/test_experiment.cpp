#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tfv/experiment.hpp"

using namespace tfv;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json tiny_json() {
    return json::parse(R"({
      "name": "tiny",
      "out": "tiny",
      "corpus": {"seed": 3, "frames": 4, "height": 8, "width": 8,
                 "image_text": 12, "text_free_video": 6, "held_out": 5},
      "train": {"total_steps": 3, "batch_size": 2, "learning_rate": 1e-3,
                "model": {"base_width": 4, "depth": 1, "embed_dim": 20}},
      "sample": {"num_steps": 3, "guidance_scale": 2.0, "count": 3}
    })");
}

ExperimentConfig tiny() { return experiment_config_from_json(tiny_json()); }

fs::path fresh_dir(const char* name) {
    const fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    return p;
}

std::string error_of(const json& j) {
    try {
        experiment_config_from_json(j).validate();
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

struct QuietLogs {
    QuietLogs() { setenv("TFV_QUIET", "1", 1); }
    ~QuietLogs() { unsetenv("TFV_QUIET"); }
};

} // namespace

TEST_CASE("experiment config round trips through JSON") {
    ExperimentConfig c = tiny();
    c.sample.prompts = {CaptionSpec{Shape::square, Color::cyan, Direction::SW, Speed::fast, true}};
    c.sample.structural = StructuralCondition::none;
    c.eval.epe = false;
    const json j = to_json(c);
    CHECK(to_json(experiment_config_from_json(j)) == j);
    CHECK(c.corpus.dims.frames == 4);
    CHECK(c.train.model.base_width == 4);
}

TEST_CASE("config errors name the offending field") {
    json j = tiny_json();
    j["sample"]["bogus"] = 1;
    CHECK(error_of(j).find("sample.bogus") != std::string::npos);

    j = tiny_json();
    j["corpus"]["frames"] = "eight";
    CHECK(error_of(j).find("corpus.frames") != std::string::npos);

    j = tiny_json();
    j["train"]["regime"] = "semi_supervised";
    CHECK(error_of(j).find("corpus.video_text") != std::string::npos);

    j = tiny_json();
    j["sample"]["structural"] = "depth";
    CHECK(error_of(j).find("sample.structural") != std::string::npos);

    j = tiny_json();
    j["sample"]["prompts"] = {"shape=blob color=red direction=E speed=slow motion=1"};
    CHECK(error_of(j).find("sample.prompts[0]") != std::string::npos);

    j = tiny_json();
    j["sample"]["count"] = 50;
    CHECK(error_of(j).find("sample.count") != std::string::npos);

    j = tiny_json();
    j["train"]["learning_rate"] = -1.0;
    CHECK(error_of(j).find("train.learning_rate") != std::string::npos);
}

TEST_CASE("prompt files skip comments and report bad lines") {
    const fs::path dir = fresh_dir("tfv_test_prompts");
    fs::create_directories(dir);
    const std::vector<CaptionSpec> prompts = {
        {Shape::circle, Color::red, Direction::E, Speed::slow, true},
        {Shape::triangle, Color::blue, Direction::N, Speed::fast, false},
    };
    write_prompt_file(dir / "p.txt", prompts);
    {
        std::ofstream os(dir / "p.txt", std::ios::app);
        os << "\n# comment\n";
    }
    CHECK(read_prompt_file(dir / "p.txt") == prompts);

    {
        std::ofstream os(dir / "bad.txt");
        os << to_record(prompts[0]) << "\nshape=circle\n";
    }
    try {
        read_prompt_file(dir / "bad.txt");
        FAIL("expected a ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("bad.txt:2") != std::string::npos);
    }

    json j = tiny_json();
    j["sample"]["prompt_file"] = "p.txt";
    std::ofstream(dir / "c.json") << j.dump();
    const ExperimentConfig c = load_experiment_config(dir / "c.json");
    CHECK(c.sample.prompts == prompts);
    fs::remove_all(dir);
}

TEST_CASE("relative output directories resolve under the output root variable") {
    unsetenv(kOutRootEnv);
    CHECK(resolve_output_dir("runs/a") == fs::path("runs/a"));
    setenv(kOutRootEnv, "/data/tfv", 1);
    CHECK(resolve_output_dir("runs/a") == fs::path("/data/tfv/runs/a"));
    CHECK(resolve_output_dir("/abs/b") == fs::path("/abs/b"));
    unsetenv(kOutRootEnv);
}

TEST_CASE("run lock excludes a second writer") {
    const fs::path dir = fresh_dir("tfv_test_lock");
    {
        RunLock a(dir);
        CHECK_THROWS_AS(RunLock{dir}, IntegrityError);
    }
    CHECK_NOTHROW(RunLock{dir});
    fs::remove_all(dir);
}

TEST_CASE("pipeline: gen-data is idempotent and sampling is reproducible") {
    QuietLogs quiet;
    const ExperimentConfig c = tiny();
    RunLayout layout{fresh_dir("tfv_test_pipeline")};
    prepare_run_dir(layout, c);
    cmd_gen_data(c, layout);
    const std::string manifest = slurp(layout.corpus_dir(CorpusKind::image_text) / "manifest");
    const auto stamp = fs::last_write_time(layout.held_out_dir() / "manifest");
    cmd_gen_data(c, layout);
    CHECK(slurp(layout.corpus_dir(CorpusKind::image_text) / "manifest") == manifest);
    CHECK(fs::last_write_time(layout.held_out_dir() / "manifest") == stamp);

    const TrainResult r = cmd_train(c, layout);
    CHECK(r.curve.size() == 3);
    CHECK(fs::exists(layout.final_checkpoint()));
    // second call finds the finished run
    CHECK(cmd_train(c, layout).params.tensors == r.params.tensors);

    cmd_sample(c, layout, layout.final_checkpoint(), "a");
    cmd_sample(c, layout, layout.final_checkpoint(), "b");
    for (int i = 0; i < 3; ++i) {
        const std::string name = i == 0 ? "00000.vid" : i == 1 ? "00001.vid" : "00002.vid";
        CHECK(file_checksum(layout.samples_dir("a") / name) == file_checksum(layout.samples_dir("b") / name));
    }
    const SampleSet back = read_samples(layout.samples_dir("a"));
    CHECK(back.videos.size() == 3);
    CHECK(back.references == std::vector<size_t>{0, 1, 2});

    const MetricsReport ra = cmd_eval(c, layout, layout.samples_dir("a"), "a");
    const MetricsReport rb = cmd_eval(c, layout, layout.samples_dir("b"), "b");
    CHECK(ra.to_json().at("metrics") == rb.to_json().at("metrics"));

    SUBCASE("ground-truth renders sit below the proxy noise floor") {
        const MetricsReport gt = cmd_eval(c, layout, {}, "gt");
        REQUIRE(gt.depth_error.has_value());
        CHECK(*gt.depth_error < 0.02);
        CHECK(*gt.sketch_error < 0.02);
    }
    SUBCASE("the report names every run and every shared metric") {
        const std::string table = report_table({ra, read_report(layout.eval_path("b"))});
        CHECK(table.find(" a ") != std::string::npos);
        CHECK(table.find(" b") != std::string::npos);
        for (const char* m : {"frame_consistency", "depth_error", "sketch_error", "epe", "frechet_distance",
                              "caption_accuracy"}) {
            CHECK(table.find(m) != std::string::npos);
        }
        const fs::path rep = layout.root / "report";
        cmd_report({ra}, {{"tiny", r.curve}}, rep);
        CHECK(fs::exists(rep / "report.txt"));
        CHECK(slurp(rep / "frame_consistency.svg").find("<svg") == 0);
        CHECK(slurp(rep / "loss.svg").find("tiny") != std::string::npos);
    }
    SUBCASE("a mismatched model is rejected before sampling") {
        ExperimentConfig other = c;
        other.train.model.base_width = 6;
        CHECK_THROWS_AS(cmd_sample(other, layout, layout.final_checkpoint(), "x"), ConfigError);
        CHECK_FALSE(fs::exists(layout.samples_dir("x")));
    }
    SUBCASE("a tampered sample fails its checksum") {
        std::fstream f(layout.samples_dir("b") / "00001.vid", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(-3, std::ios::end);
        f.put('\x7f');
        f.close();
        CHECK_THROWS_AS(read_samples(layout.samples_dir("b")), IntegrityError);
    }
    SUBCASE("a different corpus section cannot reuse the directory") {
        ExperimentConfig other = c;
        other.corpus.seed = 4;
        CHECK_THROWS_AS(prepare_run_dir(layout, other), ConfigError);
    }
    fs::remove_all(layout.root);
}

TEST_CASE("ppm grid lays frames side by side") {
    VideoTensor v(3, 3, 4, 5, 1.0);
    const fs::path p = fs::temp_directory_path() / "tfv_test_grid.ppm";
    write_ppm_grid(p, v, 2);
    const std::string s = slurp(p);
    const std::string header = "P6\n30 8\n255\n";
    REQUIRE(s.size() == header.size() + 30 * 8 * 3);
    CHECK(s.substr(0, header.size()) == header);
    CHECK(static_cast<unsigned char>(s.back()) == 255);
    fs::remove(p);
}

#ifdef TFV_CLI_PATH
TEST_CASE("cli exits nonzero on validation failures") {
    const fs::path dir = fresh_dir("tfv_test_cli");
    fs::create_directories(dir);
    json j = tiny_json();
    j["corpus"]["held_out"] = "many";
    std::ofstream(dir / "bad.json") << j.dump();
    const std::string cli = TFV_CLI_PATH;
    const std::string quiet = " >/dev/null 2>&1";
    CHECK(std::system((cli + " gen-data --config " + (dir / "bad.json").string() + quiet).c_str()) != 0);
    CHECK(std::system((cli + " frobnicate" + quiet).c_str()) != 0);
    j = tiny_json();
    std::ofstream(dir / "good.json") << j.dump();
    const std::string out = " --out " + (dir / "run").string();
    CHECK(std::system((cli + " sample --config " + (dir / "good.json").string() + out + quiet).c_str()) != 0);
    fs::remove_all(dir);
}
#endif
