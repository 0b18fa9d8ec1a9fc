// ett_lab: corpus generation, staged training, evaluation, gradient checks,
// reconstruction panels and sampling.
//
// Exit codes: 0 success, 1 check failed, 2 invalid arguments or config,
// 3 IO failure, 4 missing upstream checkpoint, 5 non-finite gradient,
// 6 checkpoint or config mismatch.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "ett/checks.hpp"
#include "ett/eval.hpp"
#include "ett/image_io.hpp"
#include "ett/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ett;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kUsage = 2, kIo = 3, kUpstream = 4, kNan = 5, kMismatch = 6 };

struct ConfigArgs {
    std::string config;
    std::vector<std::string> sets;
    std::string data;
    std::string out;
};

void add_config_options(CLI::App* cmd, ConfigArgs& a) {
    cmd->add_option("--config", a.config, "key = value config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", a.sets, "override one config key (KEY=VALUE), repeatable");
}

RunConfig build_config(const ConfigArgs& a) {
    Settings s = default_settings();
    if (!a.config.empty()) s.load_file(a.config);
    for (const auto& kv : a.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw Error(ErrorCode::config, "--set expects KEY=VALUE, got '" + kv + "'");
        s.set(trim(std::string_view(kv).substr(0, eq)), trim(std::string_view(kv).substr(eq + 1)));
    }
    if (!a.data.empty()) s.set("data.dir", a.data);
    if (!a.out.empty()) s.set("run.out_dir", a.out);
    return make_run_config(s);
}

int exit_code_for(const Error& e) {
    switch (e.code()) {
        case ErrorCode::io: return kIo;
        case ErrorCode::missing_upstream: return kUpstream;
        case ErrorCode::nan_abort: return kNan;
        case ErrorCode::checkpoint: {
            const auto& ce = static_cast<const CheckpointError&>(e);
            return ce.kind() == CheckpointError::Kind::io ? kIo : kMismatch;
        }
        default: return kUsage;
    }
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

void write_text(const std::string& path, const std::string& text) {
    if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error(ErrorCode::io, "cannot write " + path);
    f << text;
    if (!f) throw Error(ErrorCode::io, "write failed for " + path);
}

// ---- data gen ----

struct DataArgs {
    std::uint64_t seed = 0;
    std::uint64_t count = 0;
    std::string out;
};

int cmd_data_gen(const DataArgs& a) {
    if (a.count == 0) {
        std::cerr << "error: --count must be positive\n";
        return kUsage;
    }
    std::error_code ec;
    fs::create_directories(a.out, ec);
    if (ec) throw Error(ErrorCode::io, "cannot create " + a.out + ": " + ec.message());
    const Corpus corpus(a.seed, a.count);
    corpus.write(a.out);
    std::cout << "wrote " << a.count << " samples (" << corpus.train_indices().size() << " train, "
              << corpus.eval_indices().size() << " eval) to " << a.out << "\n";
    return kOk;
}

// ---- train ----

struct TrainArgs {
    std::string stage;
    ConfigArgs cfg;
    std::string resume;
    bool force = false;
    std::int64_t stop_after = -1;
    bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
    const auto stage = parse_stage(a.stage);
    if (!stage) {
        std::cerr << "error: unknown stage '" << a.stage << "'\n";
        return kUsage;
    }
    const RunConfig cfg = build_config(a.cfg);
    StageOptions opts;
    if (!a.resume.empty()) opts.resume = a.resume;
    opts.force = a.force;
    opts.stop_after = a.stop_after;
    if (!a.quiet) opts.log = [](const std::string& line) { std::cerr << line << "\n"; };
    const StageOutcome out = run_stage(*stage, cfg, opts);

    const LossBreakdown& b = out.last;
    std::cout << "stage " << a.stage << (out.skipped ? " (already complete, skipped)" : "") << ": "
              << out.steps_done << " steps\n";
    if (!out.skipped) {
        std::cout << "  final losses: total " << fmt(b.total);
        if (b.rec_active) std::cout << "  l_rec " << fmt(b.l_rec) << "  l_quant " << fmt(b.l_quant);
        if (b.gan_active) std::cout << "  l_gan " << fmt(b.l_gan);
        if (b.entropy_active) std::cout << "  l_entropy " << fmt(b.l_entropy);
        if (b.rec_active) std::cout << "  l_vq " << fmt(b.l_vq);
        if (b.cap_active) std::cout << "  l_cap " << fmt(b.l_cap);
        if (b.gen_active) std::cout << "  l_gen " << fmt(b.l_gen);
        std::cout << "\n";
    }
    std::cout << "  parameter groups:";
    for (const auto& [g, h] : out.hashes_after) {
        std::cout << " " << group_name(g) << (out.hashes_before.at(g) == h ? "=unchanged" : "=changed");
    }
    std::cout << "\n  checkpoint: " << out.checkpoint << "\n";
    return kOk;
}

// ---- eval ----

struct EvalArgs {
    std::string kind;
    std::string ckpt;
    ConfigArgs cfg;
    std::string out;
    std::int64_t limit = 0;
    std::int64_t exact_limit = 100;
    std::int64_t prompts = 200;
    std::int64_t batch = 32;
    std::int64_t top_k = 0;
    double top_p = 1.0;
    double temperature = 1.0;
    std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a) {
    const bool all = a.kind == "all";
    const RunConfig cfg = build_config(a.cfg);
    LoadedModel lm = load_model(cfg, a.ckpt);
    const EttModel& model = *lm.model;
    std::vector<std::uint64_t> split = lm.data.corpus.eval_indices();
    if (a.limit > 0 && static_cast<std::size_t>(a.limit) < split.size()) split.resize(static_cast<std::size_t>(a.limit));

    EvalReport report;
    report.codebook_utilization = [&] {
        UsageTracker t(model.codebook.codes);
        t.restore(lm.state.usage_counts, lm.state.usage_last, lm.state.usage_latest);
        return lm.state.usage_counts.empty() ? 0.0 : t.utilization(cfg.utilization_window);
    }();
    if (all || a.kind == "recon") report.recon = recon_metrics(model, lm.data.corpus, split, a.batch);
    if (all || a.kind == "caption") {
        report.caption = caption_eval(model, lm.data.corpus, lm.data.vocab, split, a.exact_limit, a.batch);
    }
    if (all || a.kind == "geneval-lite") {
        SamplingConfig sc{a.top_k, a.top_p, a.temperature, a.seed};
        const auto prompts = geneval_prompts(lm.data.corpus, static_cast<std::size_t>(a.prompts));
        report.geneval = geneval_lite(model, lm.data.vocab, prompts, sc, std::min<std::int64_t>(a.batch, 16));
    }
    write_text(a.out, report_json(report));
    std::cout << report_table(report);
    return kOk;
}

// ---- gradcheck ----

struct GradArgs {
    std::string op;
    bool end_to_end = false;
    std::uint64_t seed = 0;
    std::int64_t seeds = 1;
};

void print_check(const checks::CheckLine& c, std::uint64_t seed) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "%-24s seed %-4llu max_rel_err %.3e  threshold %.0e  %s", c.name.c_str(),
                  static_cast<unsigned long long>(seed), c.max_rel_error, c.threshold, c.passed ? "PASS" : "FAIL");
    std::cout << buf;
    if (!c.note.empty()) std::cout << "  (" << c.note << ")";
    std::cout << "\n";
    for (const auto& [g, v] : c.grad_max) {
        std::snprintf(buf, sizeof buf, "    max |grad| %-14s %.3e%s", g.c_str(), v, v > 0 ? "" : "  ZERO");
        std::cout << buf << "\n";
    }
}

int cmd_gradcheck(const GradArgs& a) {
    if (!a.op.empty() && !checks::is_op(a.op)) {
        std::cerr << "error: unknown op '" << a.op << "'; known ops:";
        for (const auto& n : checks::op_names()) std::cerr << " " << n;
        std::cerr << "\n";
        return kUsage;
    }
    bool ok = true;
    for (std::int64_t i = 0; i < a.seeds; ++i) {
        const std::uint64_t seed = a.seed + static_cast<std::uint64_t>(i);
        std::vector<checks::CheckLine> lines;
        if (a.end_to_end) {
            lines.push_back(checks::check_end_to_end(seed));
        } else if (!a.op.empty()) {
            lines.push_back(checks::check_op(a.op, seed));
        } else {
            for (const auto& n : checks::op_names()) lines.push_back(checks::check_op(n, seed));
        }
        for (const auto& c : lines) {
            print_check(c, seed);
            ok = ok && c.passed;
        }
    }
    std::cout << (ok ? "PASS" : "FAIL") << "\n";
    return ok ? kOk : kCheckFailed;
}

// ---- reconstruct ----

struct ReconArgs {
    std::vector<std::string> ckpts;
    std::vector<std::string> inputs;
    std::string out;
    ConfigArgs cfg;
};

int cmd_reconstruct(const ReconArgs& a) {
    if (a.ckpts.empty() || a.ckpts.size() > 2) {
        std::cerr << "error: pass one or two --ckpt\n";
        return kUsage;
    }
    std::vector<Image> inputs;
    std::vector<std::string> labels;
    for (const auto& path : a.inputs) {
        const auto imgs = read_images(path);
        for (std::size_t i = 0; i < imgs.size(); ++i) {
            inputs.push_back(imgs[i]);
            labels.push_back(imgs.size() == 1 ? path : path + "#" + std::to_string(i));
        }
    }
    const RunConfig cfg = build_config(a.cfg);
    for (const auto& img : inputs) {
        if (img.height != cfg.model.tokenizer.image_size || img.width != cfg.model.tokenizer.image_size) {
            std::cerr << "error: input images must be " << cfg.model.tokenizer.image_size << "x"
                      << cfg.model.tokenizer.image_size << "\n";
            return kUsage;
        }
    }
    std::vector<std::vector<Image>> recons;
    for (const auto& ck : a.ckpts) {
        LoadedModel lm = load_model(cfg, ck);
        recons.push_back(reconstruct_images(*lm.model, inputs));
    }
    std::vector<std::vector<Image>> rows;
    nlohmann::json side;
    side["checkpoints"] = a.ckpts;
    side["images"] = nlohmann::json::array();
    std::vector<double> mean(a.ckpts.size(), 0.0);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        std::vector<Image> row = {inputs[i]};
        nlohmann::json entry;
        entry["input"] = labels[i];
        entry["mse"] = nlohmann::json::array();
        for (std::size_t c = 0; c < recons.size(); ++c) {
            row.push_back(recons[c][i]);
            const double m = image_mse(clamp_image(inputs[i]), recons[c][i]);
            entry["mse"].push_back(m);
            mean[c] += m / static_cast<double>(inputs.size());
        }
        side["images"].push_back(entry);
        rows.push_back(std::move(row));
    }
    side["mean_mse"] = mean;
    if (const auto parent = fs::path(a.out).parent_path(); !parent.empty()) fs::create_directories(parent);
    write_png(a.out, tile_images(rows));
    write_text(a.out + ".json", side.dump(2) + "\n");
    for (std::size_t c = 0; c < mean.size(); ++c) std::cout << "mean mse " << a.ckpts[c] << ": " << fmt(mean[c]) << "\n";
    std::cout << "panel: " << a.out << "\nsidecar: " << a.out << ".json\n";
    return kOk;
}

// ---- generate ----

struct GenArgs {
    std::string ckpt;
    std::string prompt;
    std::int64_t top_k = 0;
    double top_p = 1.0;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    std::string out;
    ConfigArgs cfg;
};

int cmd_generate(const GenArgs& a) {
    const RunConfig cfg = build_config(a.cfg);
    LoadedModel lm = load_model(cfg, a.ckpt);
    SamplingConfig sc{a.top_k, a.top_p, a.temperature, a.seed};
    const std::vector<std::string> prompts = {a.prompt};
    const auto images = generate_images(*lm.model, lm.data.vocab, prompts, sc, 1);
    if (const auto parent = fs::path(a.out).parent_path(); !parent.empty()) fs::create_directories(parent);
    write_png(a.out, images.at(0));
    const auto detected = detect_objects(images[0]);
    std::cout << "wrote " << a.out << "; verifier sees " << detected.size() << " object(s)";
    for (const auto& d : detected) {
        std::cout << "\n  " << size_name(d.size) << " " << color_name(d.color) << " " << shape_name(d.shape) << " at "
                  << cell_name(d.cell);
    }
    std::cout << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ett_lab: end-to-end vision tokenizer tuning at desk scale"};
    app.require_subcommand(1);

    DataArgs data_args;
    auto* data = app.add_subcommand("data", "corpus utilities");
    data->require_subcommand(1);
    auto* gen = data->add_subcommand("gen", "write a synthetic corpus");
    gen->add_option("--seed", data_args.seed, "corpus seed")->required();
    gen->add_option("--count", data_args.count, "number of samples")->required();
    gen->add_option("--out", data_args.out, "output directory")->required();

    TrainArgs train_args;
    auto* train = app.add_subcommand("train", "run one training stage");
    train->add_option("stage", train_args.stage, "pretrain-tokenizer|stage1|stage2|stage3-chat|stage3-gen")
        ->required()
        ->check(CLI::IsMember({"pretrain-tokenizer", "stage1", "stage2", "stage3-chat", "stage3-gen"}));
    add_config_options(train, train_args.cfg);
    train->add_option("--data", train_args.cfg.data, "corpus directory from `data gen`");
    train->add_option("--out", train_args.cfg.out, "artifact root (default $ETT_LAB_HOME or ./ett_lab_runs)");
    train->add_option("--resume", train_args.resume, "continue from a checkpoint of this stage");
    train->add_flag("--force", train_args.force, "rerun even if an identical run is complete");
    train->add_option("--stop-after", train_args.stop_after, "stop after this many steps (checkpoint is kept)");
    train->add_flag("--quiet", train_args.quiet, "no progress lines");

    EvalArgs eval_args;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("kind", eval_args.kind, "recon|caption|geneval-lite|all")
        ->required()
        ->check(CLI::IsMember({"recon", "caption", "geneval-lite", "all"}));
    eval->add_option("--ckpt", eval_args.ckpt, "checkpoint file")->required();
    eval->add_option("--data", eval_args.cfg.data, "corpus directory");
    eval->add_option("--out", eval_args.out, "report JSON path")->required();
    add_config_options(eval, eval_args.cfg);
    eval->add_option("--limit", eval_args.limit, "evaluate at most N held-out samples (0 = all)");
    eval->add_option("--exact-limit", eval_args.exact_limit, "greedy decodes for exact match");
    eval->add_option("--prompts", eval_args.prompts, "geneval-lite prompts");
    eval->add_option("--batch", eval_args.batch, "evaluation batch size")->check(CLI::PositiveNumber);
    eval->add_option("--topk", eval_args.top_k, "geneval-lite sampling top-k (0 = all codes)");
    eval->add_option("--topp", eval_args.top_p, "geneval-lite nucleus mass");
    eval->add_option("--temperature", eval_args.temperature, "geneval-lite sampling temperature");
    eval->add_option("--seed", eval_args.seed, "geneval-lite sampling seed");

    GradArgs grad_args;
    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks in 64-bit");
    auto* op_opt = grad->add_option("--op", grad_args.op, "check a single op");
    grad->add_flag("--end-to-end", grad_args.end_to_end, "image -> tokenizer -> projector -> LM -> caption loss")
        ->excludes(op_opt);
    grad->add_option("--seed", grad_args.seed, "random seed");
    grad->add_option("--seeds", grad_args.seeds, "number of consecutive seeds")->check(CLI::PositiveNumber);

    ReconArgs recon_args;
    auto* recon = app.add_subcommand("reconstruct", "before/after reconstruction panel");
    recon->add_option("--ckpt", recon_args.ckpts, "checkpoint (pass twice for before/after)")->required();
    recon->add_option("--in", recon_args.inputs, "input PNG or image stack, repeatable")->required();
    recon->add_option("--out", recon_args.out, "panel PNG")->required();
    add_config_options(recon, recon_args.cfg);

    GenArgs gen_args;
    auto* generate = app.add_subcommand("generate", "sample an image for a caption prompt");
    generate->add_option("--ckpt", gen_args.ckpt, "stage3-gen checkpoint")->required();
    generate->add_option("--prompt", gen_args.prompt, "caption-grammar prompt")->required();
    generate->add_option("--topk", gen_args.top_k, "top-k (0 = all codes)");
    generate->add_option("--topp", gen_args.top_p, "nucleus mass");
    generate->add_option("--temperature", gen_args.temperature, "sampling temperature");
    generate->add_option("--seed", gen_args.seed, "sampling seed");
    generate->add_option("--out", gen_args.out, "output PNG")->required();
    add_config_options(generate, gen_args.cfg);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*gen) return cmd_data_gen(data_args);
        if (*train) return cmd_train(train_args);
        if (*eval) return cmd_eval(eval_args);
        if (*grad) return cmd_gradcheck(grad_args);
        if (*recon) return cmd_reconstruct(recon_args);
        if (*generate) return cmd_generate(gen_args);
    } catch (const NanAbortError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kNan;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kCheckFailed;
    }
    return kUsage;
}
