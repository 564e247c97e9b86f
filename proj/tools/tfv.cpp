#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "tfv/experiment.hpp"

namespace fs = std::filesystem;
using namespace tfv;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "override the training and sampling seeds");
    cmd->add_option("--out", c.out, "output directory (overrides the config's \"out\")");
}

struct Loaded {
    ExperimentConfig config;
    RunLayout layout;
};

Loaded load(const Common& c) {
    Loaded l;
    l.config = load_experiment_config(c.config);
    fs::path out = c.out.empty() ? l.config.out : fs::path(c.out);
    if (c.seed) {
        l.config.train.seed = *c.seed;
        l.config.train.init_seed = *c.seed;
        l.config.sample.sampler.seed = *c.seed;
        if (c.out.empty()) out /= "seed-" + std::to_string(*c.seed);
    }
    l.config.out = out;
    l.config.validate();
    l.layout.root = resolve_output_dir(out);
    return l;
}

int run_command(const std::function<void()>& body) {
    try {
        body();
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "tfv: config error: " << e.what() << '\n';
    } catch (const IntegrityError& e) {
        std::cerr << "tfv: integrity error: " << e.what() << '\n';
    } catch (const ShapeError& e) {
        std::cerr << "tfv: shape error: " << e.what() << '\n';
    } catch (const RangeError& e) {
        std::cerr << "tfv: range error: " << e.what() << '\n';
    } catch (const NonFiniteError& e) {
        std::cerr << "tfv: training diverged: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "tfv: error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-branch text-to-video diffusion on synthetic sprite videos"};
    app.require_subcommand(1);

    Common gen_opts, train_opts, sample_opts, eval_opts, run_opts;
    std::string checkpoint, label = "default", samples;
    std::optional<int> steps;
    bool ground_truth = false;

    auto* gen = app.add_subcommand("gen-data", "render the corpora named in the config");
    add_common(gen, gen_opts);

    auto* tr = app.add_subcommand("train", "train (or resume) the model");
    add_common(tr, train_opts);

    auto* sm = app.add_subcommand("sample", "generate videos for the configured prompts");
    add_common(sm, sample_opts);
    sm->add_option("--checkpoint", checkpoint, "checkpoint (default: <out>/train/final.ckpt)");
    sm->add_option("--steps", steps, "override the number of sampler steps")->check(CLI::PositiveNumber);
    sm->add_option("--label", label, "name of the sample set");

    auto* ev = app.add_subcommand("eval", "score a sample set against the held-out corpus");
    add_common(ev, eval_opts);
    ev->add_option("--label", label, "sample set to score and name of the report");
    ev->add_option("--samples", samples, "sample directory (default: <out>/samples/<label>)");
    ev->add_flag("--ground-truth", ground_truth, "score the held-out renders themselves");

    auto* rn = app.add_subcommand("run", "gen-data, train, sample and eval in one go");
    add_common(rn, run_opts);
    rn->add_option("--checkpoint", checkpoint, "sample from this checkpoint instead of the trained one");
    rn->add_option("--steps", steps, "override the number of sampler steps")->check(CLI::PositiveNumber);
    rn->add_option("--label", label, "name of the sample set and report");

    std::vector<std::string> report_files, report_labels, curve_specs;
    std::string report_out;
    auto* rp = app.add_subcommand("report", "compare metric reports as a table and plots");
    rp->add_option("reports", report_files, "MetricsReport files")->check(CLI::ExistingFile);
    rp->add_option("--label", report_labels, "legend names, one per report in order");
    rp->add_option("--curve", curve_specs, "loss curve as NAME=PATH/loss.jsonl (repeatable)");
    rp->add_option("--out", report_out, "directory for report.txt and the SVG plots")->required();

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        return run_command([&] {
            const Loaded l = load(gen_opts);
            RunLock lock(l.layout.root);
            prepare_run_dir(l.layout, l.config);
            cmd_gen_data(l.config, l.layout);
        });
    }
    if (tr->parsed()) {
        return run_command([&] {
            const Loaded l = load(train_opts);
            RunLock lock(l.layout.root);
            prepare_run_dir(l.layout, l.config);
            const TrainResult r = cmd_train(l.config, l.layout);
            if (!r.curve.empty()) {
                std::cout << "final loss " << r.curve.back().total << " after " << r.curve.size()
                          << " steps; checkpoint " << l.layout.final_checkpoint().string() << '\n';
            }
        });
    }
    if (sm->parsed() || rn->parsed()) {
        const bool full = rn->parsed();
        return run_command([&] {
            Loaded l = load(full ? run_opts : sample_opts);
            if (steps) {
                l.config.sample.sampler.num_steps = *steps;
                l.config.validate();
            }
            RunLock lock(l.layout.root);
            prepare_run_dir(l.layout, l.config);
            if (full) {
                cmd_gen_data(l.config, l.layout);
                if (checkpoint.empty()) cmd_train(l.config, l.layout);
            }
            const fs::path ck = checkpoint.empty() ? l.layout.final_checkpoint() : fs::path(checkpoint);
            cmd_sample(l.config, l.layout, ck, label);
            std::cout << "samples written to " << l.layout.samples_dir(label).string() << '\n';
            if (full) {
                const MetricsReport r = cmd_eval(l.config, l.layout, l.layout.samples_dir(label), label);
                std::cout << report_table({r});
            }
        });
    }
    if (ev->parsed()) {
        return run_command([&] {
            const Loaded l = load(eval_opts);
            RunLock lock(l.layout.root);
            fs::path dir;
            if (!ground_truth) dir = samples.empty() ? l.layout.samples_dir(label) : fs::path(samples);
            const MetricsReport r = cmd_eval(l.config, l.layout, dir, label);
            std::cout << report_table({r});
            std::cout << "report written to " << l.layout.eval_path(label).string() << '\n';
        });
    }
    if (rp->parsed()) {
        return run_command([&] {
            if (report_files.empty() && curve_specs.empty()) {
                throw ConfigError("report: give at least one metrics file or --curve");
            }
            if (!report_labels.empty() && report_labels.size() != report_files.size()) {
                throw ConfigError("--label: expected one label per report file");
            }
            std::vector<MetricsReport> reports;
            for (size_t i = 0; i < report_files.size(); ++i) {
                reports.push_back(read_report(report_files[i]));
                if (!report_labels.empty()) reports.back().label = report_labels[i];
            }
            std::vector<std::pair<std::string, std::vector<LossReport>>> curves;
            for (const std::string& spec : curve_specs) {
                const auto eq = spec.find('=');
                if (eq == std::string::npos || eq == 0) {
                    throw ConfigError("--curve: expected NAME=PATH, got '" + spec + "'");
                }
                curves.emplace_back(spec.substr(0, eq), read_loss_curve(spec.substr(eq + 1)));
            }
            const fs::path out = resolve_output_dir(report_out);
            cmd_report(reports, curves, out);
            if (!reports.empty()) std::cout << report_table(reports);
            std::cout << "report written to " << out.string() << '\n';
        });
    }
    return 0;
}
