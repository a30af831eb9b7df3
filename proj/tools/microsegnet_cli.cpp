// Command-line front end for the MicroSegNet pipeline:
//   gen-data   synthesize a micro-US-like dataset with expert/non-expert masks
//   hard-mask  derive hard-region masks and per-case hard-area fractions
//   train      train one model and write checkpoint + logs
//   evaluate   per-case Dice/HD95 tables and qualitative overlays
//   ablate     sweep the hard/easy weight ratio
//   compare    plain vs deep-supervision vs full configurations
//   report     render markdown + plots from a run directory's artifacts

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "microsegnet/eval.hpp"

namespace fs = std::filesystem;
using namespace microsegnet;

namespace {

struct ConfigCli {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_given = false;

    ModelConfig model;
    TrainConfig train;

    void resolve(CLI::App* cmd) {
        if (!config_path.empty()) apply_config(parse_config_file(config_path), model, train);
        if (seed_given || cmd->count("--seed") > 0) train.seed = seed;
    }
};

void add_config_options(CLI::App* cmd, ConfigCli& cfg) {
    cmd->add_option("--config", cfg.config_path, "key-value config file");
    cmd->add_option("--seed", cfg.seed, "training / generation seed");
}

std::vector<double> parse_ratio_list(const std::string& text) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto comma = text.find(',', pos);
        const std::string tok =
            text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        if (!tok.empty()) out.push_back(std::stod(tok));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (out.empty()) throw CLI::ValidationError("--ratios", "expected a comma-separated list");
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MicroSegNet: annotation-guided multi-scale prostate segmentation on synthetic micro-US"};
    app.require_subcommand(1);

    // ---- gen-data ----
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    std::string gen_out;
    SynthParams synth;
    PerturbParams perturb;
    double train_frac = 0.75;
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    gen->add_option("--cases", synth.num_cases, "number of patients");
    gen->add_option("--slices", synth.slices_per_case, "slices per patient");
    gen->add_option("--seed", synth.seed, "generator seed");
    gen->add_option("--image-size", synth.image_size, "rendered image side length");
    gen->add_option("--artifact-density", synth.artifact_density, "calcification/shadow density [0,1]");
    gen->add_option("--noise-level", synth.noise_level, "speckle strength [0,1]");
    gen->add_option("--irregularity", synth.shape_irregularity, "boundary irregularity [0,1]");
    gen->add_option("--train-frac", train_frac, "fraction of patients tagged train");
    gen->add_option("--amplitude-px", perturb.amplitude_px, "non-expert boundary displacement (px)");
    gen->add_option("--correlation-len", perturb.correlation_len_px,
                    "displacement field correlation length (px)");
    gen->add_option("--sector-gain", perturb.hard_sector_gain,
                    "extra displacement inside the blur sector");

    // ---- hard-mask ----
    auto* hard = app.add_subcommand("hard-mask", "derive and cache hard-region masks");
    std::string hard_dataset;
    double dilate_px = 0.0;
    hard->add_option("--dataset", hard_dataset, "dataset directory")->required();
    hard->add_option("--dilate-px", dilate_px, "grow the hard region by this radius (px)");

    // ---- train ----
    auto* tr = app.add_subcommand("train", "train a model");
    std::string tr_data, tr_out = "run";
    ConfigCli tr_cfg;
    bool no_ds = false;
    double tr_whard = -1.0, tr_weasy = -1.0, tr_lr = -1.0;
    int tr_epochs = -1, tr_batch = -1, tr_input = -1;
    std::string tr_preset, tr_stem;
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--out", tr_out, "run directory for checkpoint and logs");
    add_config_options(tr, tr_cfg);
    tr->add_flag("--no-deep-supervision", no_ds, "train on the full-resolution head only");
    tr->add_option("--w-hard", tr_whard, "hard-region weight");
    tr->add_option("--w-easy", tr_weasy, "easy-region weight");
    tr->add_option("--epochs", tr_epochs, "training epochs");
    tr->add_option("--batch-size", tr_batch, "batch size");
    tr->add_option("--lr", tr_lr, "learning rate");
    tr->add_option("--input-size", tr_input, "preprocessed image side");
    tr->add_option("--preset", tr_preset, "model preset (tiny or paper)");
    tr->add_option("--stem", tr_stem, "stem mode: hybrid or pure");

    // ---- evaluate ----
    auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on a split");
    std::string ev_data, ev_ckpt, ev_split = "test", ev_out = "run";
    double ev_threshold = 0.5;
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--ckpt", ev_ckpt, "checkpoint file")->required();
    ev->add_option("--split", ev_split, "dataset split to evaluate");
    ev->add_option("--out", ev_out, "run directory for tables and overlays");
    ev->add_option("--threshold", ev_threshold, "binarization threshold");

    // ---- ablate ----
    auto* ab = app.add_subcommand("ablate", "sweep the hard/easy weight ratio");
    std::string ab_data, ab_out = "run", ab_ratios = "1,2,4,8,12,16,24";
    int ab_runs = 2;
    ConfigCli ab_cfg;
    ab->add_option("--data", ab_data, "dataset directory")->required();
    ab->add_option("--out", ab_out, "run directory");
    ab->add_option("--ratios", ab_ratios, "comma-separated w_hard/w_easy ratios");
    ab->add_option("--runs", ab_runs, "training runs per ratio");
    add_config_options(ab, ab_cfg);

    // ---- compare ----
    auto* cp = app.add_subcommand("compare", "compare plain / deep-supervised / full variants");
    std::string cp_data, cp_out = "run";
    int cp_seeds = 3;
    double cp_ratio = 12.0;
    ConfigCli cp_cfg;
    cp->add_option("--data", cp_data, "dataset directory")->required();
    cp->add_option("--out", cp_out, "run directory");
    cp->add_option("--runs", cp_seeds, "seeds per variant");
    cp->add_option("--w-hard", cp_ratio, "ratio used by the full variant");
    add_config_options(cp, cp_cfg);

    // ---- report ----
    auto* rp = app.add_subcommand("report", "render report.md from run artifacts");
    std::string rp_run = "run";
    rp->add_option("--run", rp_run, "run directory holding the artifacts");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            synth.check();
            const auto records = generate_dataset(synth, perturb);
            const auto splits = assign_splits(records, train_frac);
            const auto summary = write_dataset(records, gen_out, splits, synth.seed);
            std::printf("wrote %d cases (%d slices) to %s\n", summary.num_cases,
                        summary.num_slices, gen_out.c_str());
            for (const auto& [split, n] : summary.cases_per_split)
                std::printf("  %s: %d cases\n", split.c_str(), n);
        }

        if (hard->parsed()) {
            const auto stats = ensure_hard_masks(hard_dataset, dilate_px);
            const auto csv_path = fs::path(hard_dataset) / "hard_fractions.csv";
            write_text_file(csv_path.string(), hard_fraction_csv(stats));
            std::printf("hard masks cached for %zu cases; fractions in %s\n", stats.size(),
                        csv_path.string().c_str());
        }

        if (tr->parsed()) {
            tr_cfg.resolve(tr);
            if (!tr_preset.empty()) {
                const int keep_input = tr_cfg.model.input_size;
                tr_cfg.model = ModelConfig::preset(tr_preset);
                if (tr->count("--input-size") == 0 && keep_input != 224)
                    tr_cfg.model.input_size = keep_input;
            }
            if (tr_input > 0) tr_cfg.model.input_size = tr_input;
            if (!tr_stem.empty())
                tr_cfg.model.stem_mode = tr_stem == "pure" ? StemMode::kPure : StemMode::kHybrid;
            if (no_ds) tr_cfg.train.deep_supervision = false;
            if (tr_whard > 0) tr_cfg.train.w_hard = tr_whard;
            if (tr_weasy > 0) tr_cfg.train.w_easy = tr_weasy;
            if (tr_epochs > 0) tr_cfg.train.epochs = tr_epochs;
            if (tr_batch > 0) tr_cfg.train.batch_size = tr_batch;
            if (tr_lr > 0) tr_cfg.train.learning_rate = tr_lr;

            ensure_hard_masks(tr_data);  // cache once per dataset
            const Dataset ds = load_dataset(tr_data);
            const TrainResult result = train(tr_cfg.model, tr_cfg.train, ds);

            fs::create_directories(tr_out);
            RunManifest manifest = RunManifest::load_or_empty(tr_out);
            CheckpointMeta meta;
            meta.epoch = tr_cfg.train.epochs;
            meta.seed = tr_cfg.train.seed;
            meta.loss_curve = result.log.epoch_loss;
            meta.w_hard = tr_cfg.train.w_hard;
            meta.w_easy = tr_cfg.train.w_easy;
            meta.deep_supervision = tr_cfg.train.deep_supervision;
            const auto ckpt = fs::path(tr_out) / "model.ckpt";
            result.model.save_checkpoint(ckpt.string(), meta);
            write_text_file((fs::path(tr_out) / "train_log.csv").string(),
                            train_log_csv(result.log));
            write_text_file((fs::path(tr_out) / "val_log.csv").string(), val_log_csv(result.log));
            manifest.add("checkpoint", "model.ckpt");
            manifest.add("train_log", "train_log.csv");
            manifest.add("val_log", "val_log.csv");
            manifest.save(tr_out);
            std::printf("trained %d epochs; first epoch loss %.6g, last %.6g\n",
                        tr_cfg.train.epochs, result.log.epoch_loss.front(),
                        result.log.epoch_loss.back());
            std::printf("checkpoint: %s\n", ckpt.string().c_str());
        }

        if (ev->parsed()) {
            CheckpointMeta meta;
            const MicroSegNet model = MicroSegNet::load_checkpoint(ev_ckpt, &meta);
            const Dataset ds = load_dataset(ev_data);
            fs::create_directories(ev_out);
            RunManifest manifest = RunManifest::load_or_empty(ev_out);
            EvaluationOptions opts;
            opts.threshold = ev_threshold;
            const SplitEval result = run_evaluation(model, ds, ev_split, ev_out, manifest, opts);
            manifest.save(ev_out);
            std::printf("split %s: %zu patients, mean Dice %.4f, mean HD95 %.3f mm\n",
                        ev_split.c_str(), result.patients.size(), result.mean_dice,
                        result.mean_hd95);
        }

        if (ab->parsed()) {
            ab_cfg.resolve(ab);
            ensure_hard_masks(ab_data);
            const Dataset ds = load_dataset(ab_data);
            const auto ratios = parse_ratio_list(ab_ratios);
            const auto rows = ablate_weight_ratio(ab_cfg.model, ab_cfg.train, ds, ratios, ab_runs);
            fs::create_directories(ab_out);
            RunManifest manifest = RunManifest::load_or_empty(ab_out);
            write_text_file((fs::path(ab_out) / "ablation.csv").string(), ablation_csv(rows));
            write_text_file((fs::path(ab_out) / "ablation.svg").string(), ablation_svg(rows));
            manifest.add("ablation", "ablation.csv");
            manifest.add("ablation_plot", "ablation.svg");
            manifest.save(ab_out);
            for (const auto& r : rows)
                std::printf("ratio %-5g dice %.4f +/- %.4f  hd95 %.3f mm%s\n", r.ratio,
                            r.mean_dice, r.std_dice, r.mean_hd95,
                            r.complete ? "" : "  [incomplete]");
        }

        if (cp->parsed()) {
            cp_cfg.resolve(cp);
            ensure_hard_masks(cp_data);
            const Dataset ds = load_dataset(cp_data);
            const auto rows =
                compare_variants(cp_cfg.model, cp_cfg.train, ds, default_variants(cp_ratio), cp_seeds);
            fs::create_directories(cp_out);
            RunManifest manifest = RunManifest::load_or_empty(cp_out);
            write_text_file((fs::path(cp_out) / "compare.csv").string(), compare_csv(rows));
            manifest.add("compare", "compare.csv");
            manifest.save(cp_out);
            for (const auto& r : rows)
                std::printf("%-18s dice %.4f  hd95 %.3f mm  hard-dice %.4f\n", r.spec.name.c_str(),
                            r.mean_dice, r.mean_hd95, r.mean_dice_hard);
        }

        if (rp->parsed()) {
            const auto rep = write_report(rp_run);
            std::printf("report written to %s\n",
                        (fs::path(rp_run) / "report.md").string().c_str());
            for (const auto& m : rep.missing) std::printf("  missing artifact: %s\n", m.c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
