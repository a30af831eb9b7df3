// Acceptance gate: end-to-end checks of the pipeline's published contracts.
// Each criterion prints exactly one [PASS]/[FAIL] line; the exit code is the
// number of failures. Training-based criteria run at desk scale on the
// bundled synthetic generator.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "microsegnet/eval.hpp"

using namespace microsegnet;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& what, const std::string& detail) {
    std::printf("[%s] criterion %d: %s (%s)\n", pass ? "PASS" : "FAIL", criterion, what.c_str(),
                detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

void run_criterion(int criterion, const std::string& what,
                   const std::function<std::pair<bool, std::string>()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    bool pass = false;
    std::string detail;
    try {
        std::tie(pass, detail) = body();
    } catch (const std::exception& e) {
        pass = false;
        detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char timing[48];
    std::snprintf(timing, sizeof(timing), "%s; %.1fs", detail.c_str(), secs);
    report(criterion, pass, what, timing);
}

// ---- independent oracles (self-contained rewrites, not the library path) ----

double oracle_wbce(const ProbabilityMap& p, const BinaryMask& y, const WeightMap* w) {
    double total = 0.0;
    for (int r = 0; r < p.rows(); ++r)
        for (int c = 0; c < p.cols(); ++c) {
            double pi = static_cast<double>(p.probs(r, c));
            pi = std::min(std::max(pi, 1e-7), 1.0 - 1e-7);
            const double yi = y.labels(r, c);
            total += (w ? w->weights(r, c) : 1.0) *
                     (yi * std::log(pi) + (1.0 - yi) * std::log(1.0 - pi));
        }
    return -total / (p.rows() * p.cols());
}

std::vector<std::pair<int, int>> oracle_boundary(const BinaryMask& m) {
    std::vector<std::pair<int, int>> pts;
    for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c) {
            if (m.labels(r, c) != 1) continue;
            const bool edge =
                r == 0 || r == m.rows() - 1 || c == 0 || c == m.cols() - 1 ||
                m.labels(r - 1, c) != 1 || m.labels(r + 1, c) != 1 || m.labels(r, c - 1) != 1 ||
                m.labels(r, c + 1) != 1;
            if (edge) pts.emplace_back(r, c);
        }
    return pts;
}

double oracle_percentile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double rank = q * (v.size() - 1);
    const auto lo = static_cast<std::size_t>(rank);
    if (lo + 1 >= v.size()) return v.back();
    return v[lo] + (rank - lo) * (v[lo + 1] - v[lo]);
}

double oracle_hd95(const BinaryMask& g, const BinaryMask& p, const Spacing& sp) {
    const auto gb = oracle_boundary(g), pb = oracle_boundary(p);
    const auto directed = [&](const auto& from, const auto& to) {
        std::vector<double> d;
        for (const auto& [ar, ac] : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& [br, bc] : to) {
                const double dr = (ar - br) * sp.row_mm;
                const double dc = (ac - bc) * sp.col_mm;
                best = std::min(best, dr * dr + dc * dc);
            }
            d.push_back(std::sqrt(best));
        }
        return d;
    };
    return std::max(oracle_percentile(directed(gb, pb), 0.95),
                    oracle_percentile(directed(pb, gb), 0.95));
}

// ---- random instance helpers ----

ProbabilityMap rand_prob(int rows, int cols, Rng& rng, float lo = 0.02f, float hi = 0.98f) {
    ProbabilityMap p;
    p.probs = Array2D<float>(rows, cols);
    for (std::size_t i = 0; i < p.probs.size(); ++i)
        p.probs.data()[i] = static_cast<float>(rng.uniform(lo, hi));
    return p;
}

BinaryMask rand_mask(int rows, int cols, Rng& rng, double p_fg = 0.5) {
    BinaryMask m;
    m.labels = Array2D<std::uint8_t>(rows, cols);
    m.spacing_mm = {0.1, 0.1};
    for (std::size_t i = 0; i < m.labels.size(); ++i)
        m.labels.data()[i] = rng.uniform() < p_fg ? 1 : 0;
    return m;
}

BinaryMask rand_nonempty(int rows, int cols, Rng& rng, double p_fg) {
    for (;;) {
        auto m = rand_mask(rows, cols, rng, p_fg);
        if (!m.empty_mask()) return m;
    }
}

WeightMap weights_of(const BinaryMask& hard, double wh, double we) {
    WeightMap w;
    w.weights = Array2D<double>(hard.rows(), hard.cols());
    for (std::size_t i = 0; i < w.weights.size(); ++i)
        w.weights.data()[i] = hard.labels.data()[i] == 1 ? wh : we;
    return w;
}

// ---- desk-scale experiment settings ----

// Reduced model for the multi-training criteria (7 and 8): 112-pixel inputs,
// otherwise the tiny architecture.
ModelConfig reduced_model() {
    ModelConfig c = ModelConfig::tiny();
    c.input_size = 112;
    return c;
}

Dataset reduced_dataset(std::uint64_t seed) {
    SynthParams p;
    p.num_cases = 20;
    p.slices_per_case = 3;
    p.image_size = 144;
    p.seed = seed;
    PerturbParams pp;
    pp.amplitude_px = 3.0;
    pp.hard_sector_gain = 3.0;
    auto records = generate_dataset(p, pp);
    for (auto& rec : records)
        rec.hard_mask = compute_hard_mask(rec.expert_mask, rec.nonexpert_mask);
    auto splits = assign_splits(records, 0.7);
    return make_dataset(std::move(records), std::move(splits));
}

TrainConfig reduced_train(std::uint64_t seed) {
    TrainConfig t;
    t.epochs = 8;
    t.seed = seed;
    return t;
}

}  // namespace

int main() {
    std::printf("microsegnet acceptance suite\n");

    // ------------------------------------------------------------------
    run_criterion(1, "loss identities: ag_bce(P,Y,1) == bce bitwise; uniform c scales exactly",
                  []() -> std::pair<bool, std::string> {
        Rng rng(1001);
        int bitwise_ok = 0;
        const int n_instances = 1000;
        for (int i = 0; i < n_instances; ++i) {
            const int rows = 1 + rng.uniform_int(16);
            const int cols = 1 + rng.uniform_int(16);
            const auto p = rand_prob(rows, cols, rng, 0.001f, 0.999f);
            const auto y = rand_mask(rows, cols, rng);
            WeightMap ones;
            ones.weights = Array2D<double>(rows, cols, 1.0);
            if (ag_bce(p, y, ones) == bce(p, y)) ++bitwise_ok;
        }
        double worst_rel = 0.0;
        for (const double c : {2.0, 3.5, 12.0}) {
            for (int i = 0; i < 50; ++i) {
                const auto p = rand_prob(12, 12, rng);
                const auto y = rand_mask(12, 12, rng);
                WeightMap w;
                w.weights = Array2D<double>(12, 12, c);
                const double lhs = ag_bce(p, y, w);
                const double rhs = c * bce(p, y);
                worst_rel = std::max(worst_rel, std::abs(lhs - rhs) / std::abs(rhs));
            }
        }
        char detail[128];
        std::snprintf(detail, sizeof(detail), "%d/%d bitwise, scaling rel err %.2e", bitwise_ok,
                      n_instances, worst_rel);
        return {bitwise_ok == n_instances && worst_rel < 1e-12, detail};
    });

    // ------------------------------------------------------------------
    run_criterion(2, "AG-BCE analytic gradient vs central differences (h=1e-5)",
                  []() -> std::pair<bool, std::string> {
        Rng rng(1002);
        double max_rel = 0.0;
        for (int trial = 0; trial < 50; ++trial) {
            auto p = rand_prob(8, 8, rng, 0.05f, 0.95f);
            const auto y = rand_mask(8, 8, rng);
            const auto hard = rand_mask(8, 8, rng, 0.3);
            const auto w = weights_of(hard, trial % 2 ? 12.0 : 4.5, 1.0);
            const auto g = ag_bce_grad(p, y, w);
            const double h = 1e-5;
            for (int k = 0; k < 8; ++k) {
                const int r = rng.uniform_int(8), c = rng.uniform_int(8);
                const float orig = p.probs(r, c);
                p.probs(r, c) = static_cast<float>(orig + h);
                const double up = ag_bce(p, y, w);
                p.probs(r, c) = static_cast<float>(orig - h);
                const double dn = ag_bce(p, y, w);
                p.probs(r, c) = orig;
                const double dh = static_cast<double>(static_cast<float>(orig + h)) -
                                  static_cast<double>(static_cast<float>(orig - h));
                const double num = (up - dn) / dh;
                const double rel =
                    std::abs(num - g(r, c)) / std::max({std::abs(num), std::abs(g(r, c)), 1e-12});
                max_rel = std::max(max_rel, rel);
            }
        }
        char detail[64];
        std::snprintf(detail, sizeof(detail), "max rel err %.2e", max_rel);
        return {max_rel < 1e-4, detail};
    });

    // ------------------------------------------------------------------
    run_criterion(3, "metric oracles: Dice exact, HD95 within 1e-9 mm of brute force",
                  []() -> std::pair<bool, std::string> {
        Rng rng(1003);
        bool all_ok = true;
        double max_hd_err = 0.0;
        for (int trial = 0; trial < 100; ++trial) {
            const auto g = rand_nonempty(16, 16, rng, 0.35);
            const auto p = rand_nonempty(16, 16, rng, 0.35);
            const Spacing sp{trial % 3 == 0 ? 0.12 : 0.1, trial % 5 == 0 ? 0.08 : 0.1};
            std::size_t inter = 0, ga = 0, pa = 0;
            for (std::size_t i = 0; i < g.labels.size(); ++i) {
                inter += (g.labels.data()[i] == 1 && p.labels.data()[i] == 1);
                ga += g.labels.data()[i] == 1;
                pa += p.labels.data()[i] == 1;
            }
            if (dice(g, p) != 2.0 * inter / double(ga + pa)) all_ok = false;
            max_hd_err = std::max(max_hd_err, std::abs(hd95(g, p, sp) - oracle_hd95(g, p, sp)));
        }
        // edge cases
        BinaryMask ident;
        ident.labels = Array2D<std::uint8_t>(12, 12, 0);
        for (int r = 4; r < 9; ++r)
            for (int c = 3; c < 8; ++c) ident.labels(r, c) = 1;
        if (dice(ident, ident) != 1.0 || hd95(ident, ident, {0.1, 0.1}) != 0.0) all_ok = false;

        BinaryMask a, b;
        a.labels = Array2D<std::uint8_t>(9, 9, 0);
        b.labels = Array2D<std::uint8_t>(9, 9, 0);
        a.labels(4, 1) = 1;
        b.labels(4, 6) = 1;
        if (dice(a, b) != 0.0) all_ok = false;  // disjoint single pixels
        if (std::abs(hd95(a, b, {0.1, 0.1}) - 0.5) > 1e-12) all_ok = false;
        bool threw = false;
        BinaryMask empty;
        empty.labels = Array2D<std::uint8_t>(9, 9, 0);
        try {
            hd95(a, empty, {0.1, 0.1});
        } catch (const std::invalid_argument&) {
            threw = true;
        }
        if (!threw) all_ok = false;

        char detail[64];
        std::snprintf(detail, sizeof(detail), "max HD95 err %.2e mm", max_hd_err);
        return {all_ok && max_hd_err < 1e-9, detail};
    });

    // ------------------------------------------------------------------
    run_criterion(4, "shape/range contract at 224 + encoder residual identity",
                  []() -> std::pair<bool, std::string> {
        const ModelConfig cfg = ModelConfig::tiny();
        MicroSegNet model(cfg, 7);
        Rng rng(1004);
        Image2D img;
        img.pixels = Array2D<float>(224, 224);
        for (std::size_t i = 0; i < img.pixels.size(); ++i)
            img.pixels.data()[i] = static_cast<float>(rng.uniform());
        img.spacing_mm = {0.1, 0.1};
        const auto pred = model.forward(img, true);
        bool ok = pred.p1.rows() == 224 && pred.p2 && pred.p2->rows() == 112 &&
                  pred.p3 && pred.p3->rows() == 56 && pred.p4 && pred.p4->rows() == 28;
        const auto in_open = [](const ProbabilityMap& p) {
            for (std::size_t i = 0; i < p.probs.size(); ++i)
                if (!(p.probs.data()[i] > 0.0f && p.probs.data()[i] < 1.0f)) return false;
            return true;
        };
        ok = ok && in_open(pred.p1) && in_open(*pred.p2) && in_open(*pred.p3) && in_open(*pred.p4);

        // residual identity: zero the attention/FFN output projections
        MicroSegNet idm(cfg, 8);
        for (int l = 0; l < cfg.num_layers; ++l) {
            std::size_t n = 0;
            float* p = idm.param_data("enc." + std::to_string(l) + ".attn.proj.w", &n);
            std::fill(p, p + n, 0.0f);
            p = idm.param_data("enc." + std::to_string(l) + ".ffn.fc2.w", &n);
            std::fill(p, p + n, 0.0f);
        }
        nn::Mat z0(cfg.num_tokens(), cfg.embed_dim);
        for (int i = 0; i < z0.size(); ++i) z0.data()[i] = static_cast<float>(rng.normal());
        const bool identity = idm.transformer_encoder(z0) == z0;
        return {ok && identity,
                std::string("sides 224/112/56/28 ") + (ok ? "ok" : "BROKEN") +
                    ", identity " + (identity ? "exact" : "BROKEN")};
    });

    // ------------------------------------------------------------------
    run_criterion(5, "training loss recomposes from its four components to 1e-12",
                  []() -> std::pair<bool, std::string> {
        Rng rng(1005);
        double worst = 0.0;
        for (int trial = 0; trial < 20; ++trial) {
            const int n = 64;
            MultiScalePrediction pred;
            pred.p1 = rand_prob(n, n, rng);
            pred.p2 = rand_prob(n / 2, n / 2, rng);
            pred.p3 = rand_prob(n / 4, n / 4, rng);
            pred.p4 = rand_prob(n / 8, n / 8, rng);
            MultiScaleTarget t;
            t.y1 = rand_mask(n, n, rng);
            t.y2 = rand_mask(n / 2, n / 2, rng);
            t.y3 = rand_mask(n / 4, n / 4, rng);
            t.y4 = rand_mask(n / 8, n / 8, rng);
            const auto w = weights_of(rand_mask(n, n, rng, 0.25), 12.0, 1.0);
            const double total = training_loss(pred, t, w, true).total;
            const double recomposed = 0.125 * oracle_wbce(*pred.p4, *t.y4, nullptr) +
                                      0.25 * oracle_wbce(*pred.p3, *t.y3, nullptr) +
                                      0.5 * oracle_wbce(*pred.p2, *t.y2, nullptr) +
                                      1.0 * oracle_wbce(pred.p1, t.y1, &w);
            worst = std::max(worst, std::abs(total - recomposed));
        }
        char detail[64];
        std::snprintf(detail, sizeof(detail), "max abs err %.2e", worst);
        return {worst < 1e-12, detail};
    });

    // ------------------------------------------------------------------
    run_criterion(6, "desk-scale training: loss halves and test Dice >= 0.90",
                  []() -> std::pair<bool, std::string> {
        SynthParams p;
        p.num_cases = 40;
        p.slices_per_case = 6;
        p.image_size = 256;
        p.seed = 2024;
        PerturbParams pp;
        pp.amplitude_px = 3.0;
        pp.hard_sector_gain = 3.0;
        auto records = generate_dataset(p, pp);
        for (auto& rec : records)
            rec.hard_mask = compute_hard_mask(rec.expert_mask, rec.nonexpert_mask);
        auto splits = assign_splits(records, 0.75);
        auto ds = make_dataset(std::move(records), std::move(splits));

        const ModelConfig mc = ModelConfig::tiny();
        TrainConfig tc;
        tc.seed = 7;
        const TrainResult result = train(mc, tc, ds);
        const double first = result.log.epoch_loss.front();
        const double last = result.log.epoch_loss.back();
        const SplitEval ev = evaluate_split(result.model, ds, "test");
        char detail[160];
        std::snprintf(detail, sizeof(detail),
                      "epoch loss %.4f -> %.4f (%.1f%% drop), test Dice %.4f over %zu patients",
                      first, last, 100.0 * (1.0 - last / first), ev.mean_dice,
                      ev.patients.size());
        return {last <= 0.5 * first && ev.mean_dice >= 0.90, detail};
    });

    // ------------------------------------------------------------------
    run_criterion(7, "mechanism direction: full config >= plain config on hard-region Dice",
                  []() -> std::pair<bool, std::string> {
        const Dataset ds = reduced_dataset(555);
        const ModelConfig mc = reduced_model();

        TrainConfig full = reduced_train(100);
        full.deep_supervision = true;
        full.w_hard = 12.0;
        TrainConfig plain = reduced_train(100);
        plain.deep_supervision = false;
        plain.w_hard = 1.0;

        const int n_seeds = 3;
        const MultiRunReport rep_full = multi_run(mc, full, ds, n_seeds);
        const MultiRunReport rep_plain = multi_run(mc, plain, ds, n_seeds);
        char detail[200];
        std::snprintf(detail, sizeof(detail),
                      "hard Dice full %.4f vs plain %.4f; global %.4f vs %.4f (3 seeds)",
                      rep_full.mean_dice_hard, rep_plain.mean_dice_hard, rep_full.mean_dice,
                      rep_plain.mean_dice);
        const bool ok = rep_full.failures == 0 && rep_plain.failures == 0 &&
                        rep_full.mean_dice_hard >= rep_plain.mean_dice_hard &&
                        rep_full.mean_dice >= rep_plain.mean_dice - 0.005;
        return {ok, detail};
    });

    // ------------------------------------------------------------------
    run_criterion(8, "ablation harness over {1,4,12,24}: CSV + plot, ratio-1 row exact",
                  []() -> std::pair<bool, std::string> {
        const Dataset ds = reduced_dataset(777);
        const ModelConfig mc = reduced_model();
        const TrainConfig base = reduced_train(300);

        const auto work = fs::path("acceptance_work") / "ablation";
        fs::create_directories(work);

        const std::vector<double> ratios = {1.0, 4.0, 12.0, 24.0};
        const auto rows = ablate_weight_ratio(mc, base, ds, ratios, 2);
        write_text_file((work / "ablation.csv").string(), ablation_csv(rows));
        write_text_file((work / "ablation.svg").string(), ablation_svg(rows));

        bool ok = rows.size() == 4;
        for (const auto& r : rows) ok = ok && r.complete;
        const auto csv_rows = parse_csv(read_text_file((work / "ablation.csv").string()));
        ok = ok && csv_rows.size() == 5;  // header + one row per ratio
        ok = ok && fs::file_size(work / "ablation.svg") > 0;

        // ratio-1 row vs the plain deep-supervised configuration, same seeds
        TrainConfig plain_ds = base;
        plain_ds.w_hard = 1.0;
        plain_ds.w_easy = 1.0;
        plain_ds.deep_supervision = true;
        const MultiRunReport rep = multi_run(mc, plain_ds, ds, 2);
        const bool exact = rows[0].mean_dice == rep.mean_dice &&
                           rows[0].mean_hd95 == rep.mean_hd95;
        char detail[200];
        std::snprintf(detail, sizeof(detail),
                      "4 rows complete=%s, ratio-1 dice %.4f vs plain-DS %.4f (%s)",
                      ok ? "yes" : "no", rows[0].mean_dice, rep.mean_dice,
                      exact ? "exact" : "MISMATCH");
        return {ok && exact, detail};
    });

    // ------------------------------------------------------------------
    run_criterion(9, "reproducibility: identical seeds give byte-identical training logs",
                  []() -> std::pair<bool, std::string> {
        SynthParams p;
        p.num_cases = 6;
        p.slices_per_case = 2;
        p.image_size = 96;
        p.seed = 99;
        PerturbParams pp;
        pp.amplitude_px = 2.0;
        auto records = generate_dataset(p, pp);
        auto splits = assign_splits(records, 0.67);
        const auto ds = make_dataset(std::move(records), std::move(splits));

        ModelConfig mc = ModelConfig::tiny();
        mc.input_size = 96;
        TrainConfig tc;
        tc.epochs = 3;
        tc.batch_size = 4;
        tc.seed = 31337;

        const auto a = train(mc, tc, ds, 1);
        const auto b = train(mc, tc, ds, 2);  // thread count must not matter
        const std::string csv_a = train_log_csv(a.log);
        const std::string csv_b = train_log_csv(b.log);
        const bool equal = csv_a == csv_b;
        char detail[96];
        std::snprintf(detail, sizeof(detail), "%zu log bytes, %s", csv_a.size(),
                      equal ? "identical" : "DIFFER");
        return {equal, detail};
    });

    std::printf("%d criteria failed\n", g_failures);
    return g_failures;
}
