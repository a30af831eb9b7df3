#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "microsegnet/image_io.hpp"
#include "microsegnet/trainer.hpp"

namespace microsegnet {

// ------------------------------------------------------------------------
// Small deterministic text helpers shared by the artifact writers. Floats
// are formatted with a fixed %.6g so re-rendering identical inputs yields
// identical bytes.
// ------------------------------------------------------------------------

namespace fmt {

inline std::string num(double v) {
    if (!std::isfinite(v)) return "nan";
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

}  // namespace fmt

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Plain comma-split CSV reader for our own artifacts (no quoting).
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::size_t pos = 0;
        while (true) {
            const auto comma = line.find(',', pos);
            if (comma == std::string::npos) {
                cells.push_back(line.substr(pos));
                break;
            }
            cells.push_back(line.substr(pos, comma - pos));
            pos = comma + 1;
        }
        rows.push_back(std::move(cells));
    }
    return rows;
}

// ------------------------------------------------------------------------
// Run directory manifest: every subcommand records the artifacts it wrote.
// ------------------------------------------------------------------------

class RunManifest {
public:
    static constexpr const char* kFile = "run_manifest.json";

    static RunManifest load_or_empty(const std::string& run_dir) {
        RunManifest m;
        const auto path = std::filesystem::path(run_dir) / kFile;
        if (std::filesystem::exists(path)) {
            const auto j = nlohmann::json::parse(read_text_file(path.string()));
            for (const auto& [k, v] : j.at("artifacts").items())
                m.artifacts_[k] = v.get<std::string>();
        }
        return m;
    }

    void add(const std::string& key, const std::string& relpath) { artifacts_[key] = relpath; }

    void save(const std::string& run_dir) const {
        nlohmann::json j;
        j["format"] = "microsegnet-run-v1";
        j["artifacts"] = artifacts_;
        write_text_file((std::filesystem::path(run_dir) / kFile).string(), j.dump(2) + "\n");
    }

    const std::map<std::string, std::string>& artifacts() const { return artifacts_; }

private:
    std::map<std::string, std::string> artifacts_;
};

// ------------------------------------------------------------------------
// Evaluation artifacts (appendix-style per-case tables)
// ------------------------------------------------------------------------

inline std::string per_slice_csv(const SplitEval& ev) {
    std::string out = "case_id,slice_index,dice,hd95_mm,dice_hard,dice_easy\n";
    for (const auto& s : ev.slices)
        out += s.case_id + "," + std::to_string(s.slice_index) + "," + fmt::num(s.dice) + "," +
               fmt::num(s.hd95) + "," + fmt::num(s.dice_hard) + "," + fmt::num(s.dice_easy) + "\n";
    return out;
}

inline std::string per_case_csv(const SplitEval& ev) {
    std::string out = "case_id,n_slices,dice,hd95_mm,dice_hard,dice_easy\n";
    for (const auto& p : ev.patients)
        out += p.case_id + "," + std::to_string(p.n_slices) + "," + fmt::num(p.dice) + "," +
               fmt::num(p.hd95) + "," + fmt::num(p.dice_hard) + "," + fmt::num(p.dice_easy) + "\n";
    out += "mean,," + fmt::num(ev.mean_dice) + "," + fmt::num(ev.mean_hd95) + "," +
           fmt::num(ev.mean_dice_hard) + "," + fmt::num(ev.mean_dice_easy) + "\n";
    return out;
}

inline nlohmann::json eval_summary_json(const SplitEval& ev, const std::string& split) {
    return {
        {"split", split},
        {"threshold", ev.threshold},
        {"n_patients", ev.patients.size()},
        {"n_slices", ev.slices.size()},
        {"mean_dice", ev.mean_dice},
        {"mean_hd95_mm", ev.mean_hd95},
        {"mean_dice_hard", ev.mean_dice_hard},
        {"mean_dice_easy", ev.mean_dice_easy},
    };
}

// Qualitative overlay: grayscale image, hard region tinted warm, expert
// contour green, prediction contour red.
inline std::vector<std::uint8_t> render_overlay_rgb(const Image2D& image,
                                                    const BinaryMask& expert,
                                                    const BinaryMask& pred,
                                                    const BinaryMask& hard) {
    const int rows = image.rows(), cols = image.cols();
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(rows) * cols * 3);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const auto v = static_cast<std::uint8_t>(
                std::clamp(image.pixels(r, c), 0.0f, 1.0f) * 255.0f + 0.5f);
            const std::size_t i = (static_cast<std::size_t>(r) * cols + c) * 3;
            rgb[i] = rgb[i + 1] = rgb[i + 2] = v;
            if (hard.labels(r, c) == 1) {
                rgb[i] = static_cast<std::uint8_t>(std::min(255, v + 70));
                rgb[i + 2] = static_cast<std::uint8_t>(v * 2 / 3);
            }
        }
    const auto draw = [&](const std::vector<std::pair<int, int>>& pts, std::uint8_t cr,
                          std::uint8_t cg, std::uint8_t cb) {
        for (const auto& [r, c] : pts) {
            const std::size_t i = (static_cast<std::size_t>(r) * cols + c) * 3;
            rgb[i] = cr;
            rgb[i + 1] = cg;
            rgb[i + 2] = cb;
        }
    };
    draw(extract_boundary(expert), 40, 230, 40);
    draw(extract_boundary(pred), 240, 60, 60);
    return rgb;
}

struct EvaluationOptions {
    double threshold = 0.5;
    int max_overlays = 6;
    int threads = 0;  // 0 = default
};

// Evaluate a model on one split and write the full artifact set under
// out_dir/eval. Returns the SplitEval for callers that keep going.
inline SplitEval run_evaluation(const MicroSegNet& model, const Dataset& dataset,
                                const std::string& split, const std::string& out_dir,
                                RunManifest& manifest, const EvaluationOptions& opts = {}) {
    namespace fs = std::filesystem;
    const int threads = opts.threads > 0 ? opts.threads : default_threads();
    const auto samples = prepare_split(dataset, split, model.config().input_size, 1.0, 1.0);
    if (samples.empty()) throw std::invalid_argument("run_evaluation: split '" + split + "' is empty");
    const SplitEval ev = evaluate_samples(model, samples, opts.threshold, threads);

    const fs::path eval_dir = fs::path(out_dir) / "eval";
    fs::create_directories(eval_dir);
    write_text_file((eval_dir / "per_slice.csv").string(), per_slice_csv(ev));
    write_text_file((eval_dir / "per_case.csv").string(), per_case_csv(ev));
    write_text_file((eval_dir / "summary.json").string(),
                    eval_summary_json(ev, split).dump(2) + "\n");
    manifest.add("eval.per_slice", "eval/per_slice.csv");
    manifest.add("eval.per_case", "eval/per_case.csv");
    manifest.add("eval.summary", "eval/summary.json");

    const fs::path overlay_dir = eval_dir / "overlays";
    fs::create_directories(overlay_dir);
    const int n_overlays = std::min<int>(opts.max_overlays, static_cast<int>(samples.size()));
    for (int i = 0; i < n_overlays; ++i) {
        const auto& s = samples[static_cast<std::size_t>(i)];
        const auto pred = model.forward(s.image, false);
        const auto pm = binarize(pred.p1, s.image.spacing_mm, opts.threshold);
        const auto rgb = render_overlay_rgb(s.image, s.y1, pm, s.hard);
        char name[64];
        std::snprintf(name, sizeof(name), "%s_slice_%d.png", s.case_id.c_str(), s.slice_index);
        png::write_rgb8((overlay_dir / name).string(), rgb, s.image.rows(), s.image.cols());
    }
    manifest.add("eval.overlays", "eval/overlays");
    return ev;
}

// ------------------------------------------------------------------------
// SVG line plots (fixed geometry, fixed formatting: byte-stable)
// ------------------------------------------------------------------------

struct PlotSeries {
    std::string label;
    std::string color;
    std::vector<std::pair<double, double>> points;
};

inline std::string svg_line_plot(const std::string& title, const std::string& xlabel,
                                 const std::string& ylabel,
                                 const std::vector<PlotSeries>& series) {
    const int width = 640, height = 420;
    const double ml = 70, mr = 20, mt = 40, mb = 50;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (const auto& [x, y] : s.points) {
            if (!std::isfinite(x) || !std::isfinite(y)) continue;
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    if (xmin > xmax) {
        xmin = 0;
        xmax = 1;
        ymin = 0;
        ymax = 1;
    }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    const double pw = width - ml - mr, ph = height - mt - mb;
    const auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
    const auto py = [&](double y) { return mt + ph - (y - ymin) / (ymax - ymin) * ph; };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
        << title << "</text>\n";
    // axes
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
        << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\""
        << mt + ph << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        const double xv = xmin + (xmax - xmin) * i / 5.0;
        const double yv = ymin + (ymax - ymin) * i / 5.0;
        svg << "<text x=\"" << fmt::num(px(xv)) << "\" y=\"" << mt + ph + 18
            << "\" text-anchor=\"middle\" font-size=\"11\">" << fmt::num(xv) << "</text>\n";
        svg << "<text x=\"" << ml - 8 << "\" y=\"" << fmt::num(py(yv) + 4)
            << "\" text-anchor=\"end\" font-size=\"11\">" << fmt::num(yv) << "</text>\n";
        svg << "<line x1=\"" << ml << "\" y1=\"" << fmt::num(py(yv)) << "\" x2=\"" << ml + pw
            << "\" y2=\"" << fmt::num(py(yv)) << "\" stroke=\"#dddddd\"/>\n";
    }
    svg << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 10
        << "\" text-anchor=\"middle\" font-size=\"13\">" << xlabel << "</text>\n";
    svg << "<text x=\"18\" y=\"" << mt + ph / 2
        << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 "
        << mt + ph / 2 << ")\">" << ylabel << "</text>\n";
    int li = 0;
    for (const auto& s : series) {
        svg << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"2\" points=\"";
        for (const auto& [x, y] : s.points) {
            if (!std::isfinite(x) || !std::isfinite(y)) continue;
            svg << fmt::num(px(x)) << "," << fmt::num(py(y)) << " ";
        }
        svg << "\"/>\n";
        for (const auto& [x, y] : s.points) {
            if (!std::isfinite(x) || !std::isfinite(y)) continue;
            svg << "<circle cx=\"" << fmt::num(px(x)) << "\" cy=\"" << fmt::num(py(y))
                << "\" r=\"3\" fill=\"" << s.color << "\"/>\n";
        }
        svg << "<text x=\"" << ml + pw - 8 << "\" y=\"" << mt + 16 + 16 * li
            << "\" text-anchor=\"end\" font-size=\"12\" fill=\"" << s.color << "\">" << s.label
            << "</text>\n";
        ++li;
    }
    svg << "</svg>\n";
    return svg.str();
}

// ------------------------------------------------------------------------
// Weight-ratio ablation harness (the Fig.-5-style experiment)
// ------------------------------------------------------------------------

struct AblationRow {
    double ratio = 1.0;
    int runs = 0;
    bool complete = false;
    int failures = 0;
    double mean_dice = 0.0, std_dice = 0.0;
    double mean_hd95 = 0.0, std_hd95 = 0.0;
    double mean_dice_hard = 0.0;
};

inline std::vector<AblationRow> ablate_weight_ratio(const ModelConfig& model_cfg,
                                                    const TrainConfig& base_cfg,
                                                    const Dataset& dataset,
                                                    const std::vector<double>& ratios,
                                                    int runs_per_ratio,
                                                    int threads = default_threads()) {
    std::vector<AblationRow> rows;
    for (const double ratio : ratios) {
        if (ratio < 1.0) throw std::invalid_argument("ablate_weight_ratio: ratio must be >= 1");
        TrainConfig cfg = base_cfg;
        cfg.w_hard = ratio;
        cfg.w_easy = 1.0;
        cfg.deep_supervision = true;
        const MultiRunReport rep = multi_run(model_cfg, cfg, dataset, runs_per_ratio, threads);
        AblationRow row;
        row.ratio = ratio;
        row.runs = runs_per_ratio;
        row.failures = rep.failures;
        row.complete = rep.failures == 0;
        row.mean_dice = rep.mean_dice;
        row.std_dice = rep.std_dice;
        row.mean_hd95 = rep.mean_hd95;
        row.std_hd95 = rep.std_hd95;
        row.mean_dice_hard = rep.mean_dice_hard;
        rows.push_back(row);
    }
    return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string out =
        "ratio,runs,complete,failures,mean_dice,std_dice,mean_hd95_mm,std_hd95_mm,mean_dice_hard\n";
    for (const auto& r : rows)
        out += fmt::num(r.ratio) + "," + std::to_string(r.runs) + "," +
               (r.complete ? "true" : "false") + "," + std::to_string(r.failures) + "," +
               fmt::num(r.mean_dice) + "," + fmt::num(r.std_dice) + "," + fmt::num(r.mean_hd95) +
               "," + fmt::num(r.std_hd95) + "," + fmt::num(r.mean_dice_hard) + "\n";
    return out;
}

inline std::string ablation_svg(const std::vector<AblationRow>& rows) {
    PlotSeries dice_s{"mean Dice", "#1f77b4", {}};
    PlotSeries hard_s{"hard-region Dice", "#2ca02c", {}};
    for (const auto& r : rows) {
        dice_s.points.emplace_back(r.ratio, r.mean_dice);
        hard_s.points.emplace_back(r.ratio, r.mean_dice_hard);
    }
    return svg_line_plot("Weight-ratio ablation", "w_hard / w_easy", "Dice",
                         {dice_s, hard_s});
}

// ------------------------------------------------------------------------
// Variant comparison (ablation variants of the one architecture)
// ------------------------------------------------------------------------

struct VariantSpec {
    std::string name;
    bool deep_supervision = true;
    double w_hard = 12.0;
};

inline std::vector<VariantSpec> default_variants(double full_ratio = 12.0) {
    return {
        {"plain", false, 1.0},             // no deep supervision, no AG-BCE
        {"deep_supervision", true, 1.0},   // deep supervision only
        {"full", true, full_ratio},        // deep supervision + AG-BCE
    };
}

struct VariantRow {
    VariantSpec spec;
    int seeds = 0;
    int failures = 0;
    double mean_dice = 0.0, std_dice = 0.0;
    double mean_hd95 = 0.0;
    double mean_dice_hard = 0.0;
    double mean_dice_easy = 0.0;
    std::string paper_ref;  // static annotation, not a measurement
};

inline std::vector<VariantRow> compare_variants(const ModelConfig& model_cfg,
                                                const TrainConfig& base_cfg,
                                                const Dataset& dataset,
                                                const std::vector<VariantSpec>& variants,
                                                int n_seeds,
                                                int threads = default_threads()) {
    if (variants.size() < 2)
        throw std::invalid_argument("compare_variants: need at least two variants");
    std::vector<VariantRow> rows;
    for (const auto& v : variants) {
        TrainConfig cfg = base_cfg;
        cfg.deep_supervision = v.deep_supervision;
        cfg.w_hard = v.w_hard;
        cfg.w_easy = 1.0;
        const MultiRunReport rep = multi_run(model_cfg, cfg, dataset, n_seeds, threads);
        VariantRow row;
        row.spec = v;
        row.seeds = n_seeds;
        row.failures = rep.failures;
        row.mean_dice = rep.mean_dice;
        row.std_dice = rep.std_dice;
        row.mean_hd95 = rep.mean_hd95;
        row.mean_dice_hard = rep.mean_dice_hard;
        row.mean_dice_easy = rep.mean_dice_easy;
        if (v.deep_supervision && v.w_hard > 1.0)
            row.paper_ref = "reported clinical reference: 0.942 DSC / 2.11 mm HD95";
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string compare_csv(const std::vector<VariantRow>& rows) {
    std::string out =
        "variant,deep_supervision,w_hard,seeds,failures,mean_dice,std_dice,mean_hd95_mm,"
        "mean_dice_hard,mean_dice_easy,paper_ref\n";
    for (const auto& r : rows)
        out += r.spec.name + "," + (r.spec.deep_supervision ? "true" : "false") + "," +
               fmt::num(r.spec.w_hard) + "," + std::to_string(r.seeds) + "," +
               std::to_string(r.failures) + "," + fmt::num(r.mean_dice) + "," +
               fmt::num(r.std_dice) + "," + fmt::num(r.mean_hd95) + "," +
               fmt::num(r.mean_dice_hard) + "," + fmt::num(r.mean_dice_easy) + "," + r.paper_ref +
               "\n";
    return out;
}

// ------------------------------------------------------------------------
// Report: markdown + plots rendered purely from the CSV artifacts of a run
// directory. Missing artifacts degrade to "no data" stubs; identical inputs
// produce identical bytes.
// ------------------------------------------------------------------------

namespace detail {

inline std::string csv_to_md_table(const std::vector<std::vector<std::string>>& rows) {
    if (rows.empty()) return "_no data available._\n";
    std::string md = "|";
    for (const auto& c : rows.front()) md += " " + c + " |";
    md += "\n|";
    for (std::size_t i = 0; i < rows.front().size(); ++i) md += " --- |";
    md += "\n";
    for (std::size_t r = 1; r < rows.size(); ++r) {
        md += "|";
        for (const auto& c : rows[r]) md += " " + c + " |";
        md += "\n";
    }
    return md;
}

}  // namespace detail

struct ReportResult {
    std::string markdown;
    std::vector<std::string> missing;   // artifact keys that were absent
    std::vector<std::string> written;   // files written next to report.md
};

inline ReportResult render_report(const std::string& run_dir) {
    namespace fs = std::filesystem;
    ReportResult result;
    std::ostringstream md;
    md << "# MicroSegNet run report\n\n";
    md << "All numbers below are read verbatim from the run's CSV artifacts.\n\n";

    // Training section
    md << "## Training\n\n";
    const fs::path train_csv = fs::path(run_dir) / "train_log.csv";
    if (fs::exists(train_csv)) {
        const auto rows = parse_csv(read_text_file(train_csv.string()));
        if (rows.size() > 1) {
            PlotSeries loss{"loss", "#d62728", {}};
            for (std::size_t i = 1; i < rows.size(); ++i)
                loss.points.emplace_back(std::stod(rows[i][0]), std::stod(rows[i][2]));
            write_text_file((fs::path(run_dir) / "loss_curve.svg").string(),
                            svg_line_plot("Training loss", "step", "loss", {loss}));
            result.written.push_back("loss_curve.svg");
            md << "![training loss](loss_curve.svg)\n\n";
            md << "First logged step: loss " << rows[1][2] << " (epoch " << rows[1][1] << "). ";
            md << "Last logged step: loss " << rows.back()[2] << " (epoch " << rows.back()[1]
               << ").\n\n";
        } else {
            md << "_no data available._\n\n";
            result.missing.push_back("train_log.csv (empty)");
        }
    } else {
        md << "_no data available._\n\n";
        result.missing.push_back("train_log.csv");
    }
    const fs::path val_csv = fs::path(run_dir) / "val_log.csv";
    if (fs::exists(val_csv)) {
        md << "### Validation Dice per epoch\n\n";
        md << detail::csv_to_md_table(parse_csv(read_text_file(val_csv.string()))) << "\n";
    }

    // Evaluation section
    md << "## Evaluation\n\n";
    const fs::path per_case = fs::path(run_dir) / "eval" / "per_case.csv";
    if (fs::exists(per_case)) {
        if (fs::exists(fs::path(run_dir) / "eval" / "summary.json")) {
            const auto sj = nlohmann::json::parse(
                read_text_file((fs::path(run_dir) / "eval" / "summary.json").string()));
            md << "Split `" << sj.at("split").get<std::string>() << "`, binarization threshold "
               << fmt::num(sj.at("threshold").get<double>()) << ".\n\n";
        }
        md << detail::csv_to_md_table(parse_csv(read_text_file(per_case.string()))) << "\n";
    } else {
        md << "_no data available._\n\n";
        result.missing.push_back("eval/per_case.csv");
    }

    // Ablation section
    md << "## Ablation\n\n";
    const fs::path abl = fs::path(run_dir) / "ablation.csv";
    if (fs::exists(abl)) {
        const auto rows = parse_csv(read_text_file(abl.string()));
        md << detail::csv_to_md_table(rows) << "\n";
        if (rows.size() > 1) {
            std::vector<AblationRow> arows;
            for (std::size_t i = 1; i < rows.size(); ++i) {
                AblationRow r;
                r.ratio = std::stod(rows[i][0]);
                r.mean_dice = std::stod(rows[i][4]);
                r.mean_dice_hard = std::stod(rows[i][8]);
                arows.push_back(r);
            }
            write_text_file((fs::path(run_dir) / "ablation.svg").string(), ablation_svg(arows));
            result.written.push_back("ablation.svg");
            md << "![ablation curve](ablation.svg)\n\n";
        }
    } else {
        md << "_no data available._\n\n";
        result.missing.push_back("ablation.csv");
    }

    // Comparison section
    const fs::path cmp = fs::path(run_dir) / "compare.csv";
    if (fs::exists(cmp)) {
        md << "## Variant comparison\n\n";
        md << detail::csv_to_md_table(parse_csv(read_text_file(cmp.string()))) << "\n";
    }

    // Qualitative overlays
    md << "## Qualitative overlays\n\n";
    const fs::path overlays = fs::path(run_dir) / "eval" / "overlays";
    std::vector<std::string> overlay_files;
    if (fs::exists(overlays))
        for (const auto& e : fs::directory_iterator(overlays))
            if (e.path().extension() == ".png") overlay_files.push_back(e.path().filename().string());
    std::sort(overlay_files.begin(), overlay_files.end());
    if (overlay_files.empty()) {
        md << "_no data available._\n";
        result.missing.push_back("eval/overlays");
    } else {
        md << "Expert contour in green, prediction in red, hard region tinted.\n\n";
        for (const auto& f : overlay_files)
            md << "![overlay](eval/overlays/" << f << ")\n";
    }
    md << "\n";

    result.markdown = md.str();
    return result;
}

inline ReportResult write_report(const std::string& run_dir) {
    ReportResult res = render_report(run_dir);
    write_text_file((std::filesystem::path(run_dir) / "report.md").string(), res.markdown);
    res.written.push_back("report.md");
    return res;
}

// ------------------------------------------------------------------------
// Hard-mask cache: derive expert-XOR-nonexpert masks for every slice of an
// on-disk dataset, write them as slice_{k}_hard.png, register them in the
// manifest, and report per-case hard-area fractions.
// ------------------------------------------------------------------------

struct HardMaskStats {
    std::string case_id;
    int n_slices = 0;
    double mean_fraction = 0.0;
};

inline std::vector<HardMaskStats> ensure_hard_masks(const std::string& root,
                                                    double dilate_px = 0.0) {
    namespace fs = std::filesystem;
    const Dataset ds = load_dataset(root);
    auto manifest = nlohmann::json::parse(read_text_file((fs::path(root) / "manifest.json").string()));

    std::map<std::string, HardMaskStats> stats;
    std::vector<std::string> order;
    std::map<std::pair<std::string, int>, std::string> hard_paths;
    for (const auto& rec : ds.records) {
        BinaryMask hard = rec.hard_mask
                              ? *rec.hard_mask
                              : compute_hard_mask(rec.expert_mask, rec.nonexpert_mask);
        if (!rec.hard_mask && dilate_px > 0.0) hard = dilate_mask(hard, dilate_px);
        const std::string rel =
            rec.case_id + "/slice_" + std::to_string(rec.slice_index) + "_hard.png";
        if (!rec.hard_mask)
            png::write_gray8((fs::path(root) / rel).string(), mask_to_png(hard));
        hard_paths[{rec.case_id, rec.slice_index}] = rel;
        if (stats.find(rec.case_id) == stats.end()) {
            order.push_back(rec.case_id);
            stats[rec.case_id].case_id = rec.case_id;
        }
        auto& st = stats[rec.case_id];
        st.n_slices += 1;
        st.mean_fraction += hard_fraction(hard);
    }
    for (auto& [id, st] : stats) st.mean_fraction /= st.n_slices;

    for (auto& jcase : manifest.at("cases"))
        for (auto& jslice : jcase.at("slices")) {
            const auto key = std::make_pair(jcase.at("case_id").get<std::string>(),
                                            jslice.at("slice_index").get<int>());
            if (const auto it = hard_paths.find(key); it != hard_paths.end())
                jslice["hard"] = it->second;
        }
    write_text_file((fs::path(root) / "manifest.json").string(), manifest.dump(2) + "\n");

    std::vector<HardMaskStats> out;
    for (const auto& id : order) out.push_back(stats[id]);
    return out;
}

inline std::string hard_fraction_csv(const std::vector<HardMaskStats>& stats) {
    std::string out = "case_id,n_slices,mean_hard_fraction\n";
    for (const auto& s : stats)
        out += s.case_id + "," + std::to_string(s.n_slices) + "," + fmt::num(s.mean_fraction) + "\n";
    return out;
}

}  // namespace microsegnet
