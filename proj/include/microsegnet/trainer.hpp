#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <mutex>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "microsegnet/core.hpp"
#include "microsegnet/hard_region.hpp"
#include "microsegnet/losses.hpp"
#include "microsegnet/metrics.hpp"
#include "microsegnet/model.hpp"
#include "microsegnet/synthdata.hpp"

namespace microsegnet {

// Runs f(0..n-1) across up to `threads` workers. Work is assigned round-robin
// by index; callers that need determinism must keep any reduction ordered by
// index, never by completion time.
template <typename F>
inline void parallel_for(int n, int threads, F&& f) {
    threads = std::max(1, std::min(threads, n));
    if (threads <= 1) {
        for (int i = 0; i < n; ++i) f(i);
        return;
    }
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (int i = t; i < n; i += threads) f(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

inline int default_threads() {
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 2 : static_cast<int>(hw);
}

// Momentum SGD with decoupled-from-nothing classic weight decay:
//   v <- m*v - lr*(g + wd*theta);  theta <- theta + v
class SgdOptimizer {
public:
    SgdOptimizer(std::size_t n, double lr, double momentum, double weight_decay)
        : velocity_(n, 0.0f), lr_(static_cast<float>(lr)),
          momentum_(static_cast<float>(momentum)), wd_(static_cast<float>(weight_decay)) {}

    void step(float* theta, const float* grad) {
        for (std::size_t i = 0; i < velocity_.size(); ++i) {
            const float g = grad[i] + wd_ * theta[i];
            velocity_[i] = momentum_ * velocity_[i] - lr_ * g;
            theta[i] += velocity_[i];
        }
    }

private:
    std::vector<float> velocity_;
    float lr_, momentum_, wd_;
};

struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One record made training-ready: preprocessed image, ground truth at the
// four supervision scales, per-pixel weight map.
struct PreparedSample {
    Image2D image;
    BinaryMask y1, y2, y3, y4;
    BinaryMask hard;
    WeightMap w;
    std::string case_id;
    int slice_index = 0;
};

inline PreparedSample prepare_sample(const CaseRecord& rec, int input_size, double w_hard,
                                     double w_easy) {
    PreparedSample s;
    s.case_id = rec.case_id;
    s.slice_index = rec.slice_index;
    s.image = preprocess(rec.image, input_size);
    s.y1 = resize_mask_nearest(rec.expert_mask, input_size);
    // XOR commutes with nearest resampling, so resizing a cached hard mask
    // and recomputing it from resized annotations agree pixel for pixel.
    if (rec.hard_mask) {
        s.hard = resize_mask_nearest(*rec.hard_mask, input_size);
    } else {
        s.hard = compute_hard_mask(s.y1, resize_mask_nearest(rec.nonexpert_mask, input_size));
    }
    s.w = build_weight_map(s.hard, w_hard, w_easy);
    s.y2 = downsample_mask(s.y1, 2);
    s.y3 = downsample_mask(s.y1, 4);
    s.y4 = downsample_mask(s.y1, 8);
    return s;
}

struct TrainLogRow {
    int step = 0;
    int epoch = 0;
    double loss = 0.0;
    double p1 = 0.0, p2 = 0.0, p3 = 0.0, p4 = 0.0;  // weighted components
};

struct TrainLog {
    std::vector<TrainLogRow> steps;
    std::vector<double> epoch_loss;  // mean step loss per epoch
    std::vector<double> val_dice;    // per epoch; empty when no val patients
};

struct TrainResult {
    MicroSegNet model;
    TrainLog log;
};

namespace detail {

inline MultiScaleTarget targets_of(const PreparedSample& s, bool ds) {
    MultiScaleTarget t;
    t.y1 = s.y1;
    if (ds) {
        t.y2 = s.y2;
        t.y3 = s.y3;
        t.y4 = s.y4;
    }
    return t;
}

// dL/dz for one head: coeff * w * (p - y) / (K * batch).
inline nn::Feat head_logit_grad(const ProbabilityMap& p, const BinaryMask& y, const WeightMap* w,
                                double coeff, int batch) {
    nn::Feat g(1, p.rows(), p.cols());
    const double scale = coeff / (static_cast<double>(p.probs.size()) * batch);
    for (int i = 0; i < g.pixels(); ++i) {
        const double wi = w ? w->weights.data()[i] : 1.0;
        const double diff = static_cast<double>(p.probs.data()[i]) -
                            static_cast<double>(y.labels.data()[i]);
        g.m(0, i) = static_cast<float>(scale * wi * diff);
    }
    return g;
}

}  // namespace detail

// Case-level split bookkeeping with duplicate detection. Throws if a case id
// is tagged both train and test anywhere in the manifest entries.
inline void ensure_disjoint_splits(const std::vector<std::pair<std::string, std::string>>& entries) {
    std::map<std::string, std::set<std::string>> tags;
    for (const auto& [id, split] : entries) tags[id].insert(split);
    for (const auto& [id, s] : tags)
        if (s.count("train") && s.count("test"))
            throw std::runtime_error("split leakage: case " + id + " appears in train and test");
}

// Per-slice and per-patient evaluation of a model on one dataset split.
struct SliceEval {
    std::string case_id;
    int slice_index = 0;
    double dice = 0.0;
    double hd95 = std::numeric_limits<double>::quiet_NaN();  // NaN when a boundary is empty
    double dice_hard = 0.0;
    double dice_easy = 0.0;
};

struct PatientEval {
    std::string case_id;
    int n_slices = 0;
    double dice = 0.0;
    double hd95 = std::numeric_limits<double>::quiet_NaN();
    double dice_hard = 0.0;
    double dice_easy = 0.0;
};

struct SplitEval {
    std::vector<SliceEval> slices;
    std::vector<PatientEval> patients;
    double mean_dice = 0.0;
    double mean_hd95 = std::numeric_limits<double>::quiet_NaN();
    double mean_dice_hard = 0.0;
    double mean_dice_easy = 0.0;
    double threshold = 0.5;
};

inline SplitEval evaluate_samples(const MicroSegNet& model,
                                  const std::vector<PreparedSample>& samples,
                                  double threshold = 0.5, int threads = default_threads()) {
    SplitEval ev;
    ev.threshold = threshold;
    ev.slices.resize(samples.size());
    parallel_for(static_cast<int>(samples.size()), threads, [&](int i) {
        const PreparedSample& s = samples[static_cast<std::size_t>(i)];
        const MultiScalePrediction pred = model.forward(s.image, /*deep_supervision=*/false);
        const BinaryMask pm = binarize(pred.p1, s.image.spacing_mm, threshold);
        SliceEval& se = ev.slices[static_cast<std::size_t>(i)];
        se.case_id = s.case_id;
        se.slice_index = s.slice_index;
        se.dice = dice(s.y1, pm);
        if (!s.y1.empty_mask() && !pm.empty_mask()) se.hd95 = hd95(s.y1, pm, s.image.spacing_mm);
        se.dice_hard = dice_in_region(s.y1, pm, s.hard);
        BinaryMask easy;
        easy.labels = Array2D<std::uint8_t>(s.hard.rows(), s.hard.cols());
        for (std::size_t j = 0; j < easy.labels.size(); ++j)
            easy.labels.data()[j] = s.hard.labels.data()[j] == 1 ? 0 : 1;
        se.dice_easy = dice_in_region(s.y1, pm, easy);
    });

    // Aggregate per patient (mean over that patient's slices), then overall.
    std::vector<std::string> order;
    std::map<std::string, PatientEval> agg;
    std::map<std::string, int> hd_counts;
    for (const auto& se : ev.slices) {
        if (agg.find(se.case_id) == agg.end()) {
            order.push_back(se.case_id);
            agg[se.case_id].case_id = se.case_id;
            agg[se.case_id].hd95 = 0.0;
        }
        PatientEval& pe = agg[se.case_id];
        pe.n_slices += 1;
        pe.dice += se.dice;
        pe.dice_hard += se.dice_hard;
        pe.dice_easy += se.dice_easy;
        if (std::isfinite(se.hd95)) {
            pe.hd95 += se.hd95;
            hd_counts[se.case_id] += 1;
        }
    }
    double sum_d = 0.0, sum_h = 0.0, sum_dh = 0.0, sum_de = 0.0;
    int n_h = 0;
    for (const auto& id : order) {
        PatientEval pe = agg[id];
        pe.dice /= pe.n_slices;
        pe.dice_hard /= pe.n_slices;
        pe.dice_easy /= pe.n_slices;
        const int hc = hd_counts[id];
        pe.hd95 = hc > 0 ? pe.hd95 / hc : std::numeric_limits<double>::quiet_NaN();
        sum_d += pe.dice;
        sum_dh += pe.dice_hard;
        sum_de += pe.dice_easy;
        if (std::isfinite(pe.hd95)) {
            sum_h += pe.hd95;
            ++n_h;
        }
        ev.patients.push_back(std::move(pe));
    }
    if (!ev.patients.empty()) {
        ev.mean_dice = sum_d / static_cast<double>(ev.patients.size());
        ev.mean_dice_hard = sum_dh / static_cast<double>(ev.patients.size());
        ev.mean_dice_easy = sum_de / static_cast<double>(ev.patients.size());
        ev.mean_hd95 = n_h > 0 ? sum_h / n_h : std::numeric_limits<double>::quiet_NaN();
    }
    return ev;
}

inline std::vector<PreparedSample> prepare_split(const Dataset& ds, const std::string& split,
                                                 int input_size, double w_hard, double w_easy) {
    std::vector<PreparedSample> out;
    for (const CaseRecord* rec : ds.split_records(split))
        out.push_back(prepare_sample(*rec, input_size, w_hard, w_easy));
    return out;
}

inline SplitEval evaluate_split(const MicroSegNet& model, const Dataset& ds,
                                const std::string& split, double threshold = 0.5,
                                int threads = default_threads()) {
    const auto samples = prepare_split(ds, split, model.config().input_size, 1.0, 1.0);
    return evaluate_samples(model, samples, threshold, threads);
}

// ------------------------------------------------------------------------
// Training loop: SGD over the combined multi-scale loss, fixed learning
// rate, per-epoch data order derived from the seed, deterministic given
// (seed, manifest) regardless of thread count.
// ------------------------------------------------------------------------

inline TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                         const Dataset& dataset, int threads = default_threads()) {
    model_cfg.check();
    train_cfg.check();
    ensure_disjoint_splits(dataset.split_entries);

    // Admission control: every training record must pass validation.
    for (const CaseRecord* rec : dataset.split_records("train")) {
        const auto violations = validate_case(*rec);
        if (!violations.empty())
            throw std::invalid_argument("train: record " + rec->case_id + " slice " +
                                        std::to_string(rec->slice_index) +
                                        " failed validation: " + violations.front());
    }

    std::vector<PreparedSample> all_train = prepare_split(
        dataset, "train", model_cfg.input_size, train_cfg.w_hard, train_cfg.w_easy);
    if (all_train.empty()) throw std::invalid_argument("train: no records in the train split");
    for (const auto& s : all_train) {
        CaseRecord probe;
        probe.image = s.image;
        probe.expert_mask = s.y1;
        probe.nonexpert_mask = s.y1;
        probe.hard_mask = s.hard;
        probe.weight_map = s.w;
        probe.case_id = s.case_id;
        const auto violations = validate_case(probe, model_cfg.input_size);
        if (!violations.empty())
            throw std::invalid_argument("train: prepared sample " + s.case_id +
                                        " failed validation: " + violations.front());
    }

    // Validation carve-out: 10% of training patients (rounded down), chosen
    // by a seed-derived shuffle. Model selection stays "last epoch"; the val
    // Dice is a per-epoch sanity signal only.
    std::vector<std::string> patients;
    for (const auto& s : all_train)
        if (patients.empty() || patients.back() != s.case_id) patients.push_back(s.case_id);
    std::set<std::string> val_ids;
    {
        const std::size_t n_val = patients.size() / 10;
        std::vector<std::string> shuffled = patients;
        Rng rng = Rng::for_stream(train_cfg.seed, 0x7A11DA7EULL);
        rng.shuffle(shuffled);
        for (std::size_t i = 0; i < n_val; ++i) val_ids.insert(shuffled[i]);
    }
    std::vector<PreparedSample> train_samples, val_samples;
    for (auto& s : all_train)
        (val_ids.count(s.case_id) ? val_samples : train_samples).push_back(std::move(s));

    MicroSegNet model(model_cfg, train_cfg.seed);
    SgdOptimizer opt(model.parameter_count(), train_cfg.learning_rate, train_cfg.momentum,
                     train_cfg.weight_decay);

    const int n = static_cast<int>(train_samples.size());
    const int batch = train_cfg.batch_size;
    TrainLog log;
    std::vector<std::vector<float>> item_grads(
        static_cast<std::size_t>(std::min(batch, n)),
        std::vector<float>(model.parameter_count(), 0.0f));
    std::vector<float> grad(model.parameter_count(), 0.0f);
    std::vector<TrainingLossBreakdown> item_losses(item_grads.size());

    int step = 0;
    for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
        std::vector<int> perm(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
        Rng erng = Rng::for_stream(train_cfg.seed, 0xE90C0000ULL + static_cast<std::uint64_t>(epoch));
        erng.shuffle(perm);

        double epoch_sum = 0.0;
        int epoch_steps = 0;
        for (int start = 0; start < n; start += batch) {
            const int bn = std::min(batch, n - start);
            parallel_for(bn, threads, [&](int bi) {
                const PreparedSample& s =
                    train_samples[static_cast<std::size_t>(perm[static_cast<std::size_t>(start + bi)])];
                MicroSegNet::Cache cache;
                const MultiScalePrediction pred =
                    model.forward_train(s.image, train_cfg.deep_supervision, cache);
                item_losses[static_cast<std::size_t>(bi)] =
                    training_loss(pred, detail::targets_of(s, train_cfg.deep_supervision), s.w,
                                  train_cfg.deep_supervision);
                MicroSegNet::HeadGrads hg;
                hg.g1 = detail::head_logit_grad(pred.p1, s.y1, &s.w, kScaleLossWeights[0], bn);
                if (train_cfg.deep_supervision) {
                    hg.g2 = detail::head_logit_grad(*pred.p2, s.y2, nullptr, kScaleLossWeights[1], bn);
                    hg.g3 = detail::head_logit_grad(*pred.p3, s.y3, nullptr, kScaleLossWeights[2], bn);
                    hg.g4 = detail::head_logit_grad(*pred.p4, s.y4, nullptr, kScaleLossWeights[3], bn);
                }
                auto& ig = item_grads[static_cast<std::size_t>(bi)];
                std::fill(ig.begin(), ig.end(), 0.0f);
                model.backward(cache, hg, ig.data());
            });

            // Ordered reduction keeps the update bitwise reproducible.
            std::fill(grad.begin(), grad.end(), 0.0f);
            for (int bi = 0; bi < bn; ++bi) {
                const auto& ig = item_grads[static_cast<std::size_t>(bi)];
                for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += ig[j];
            }

            TrainLogRow row;
            row.step = step;
            row.epoch = epoch;
            for (int bi = 0; bi < bn; ++bi) {
                const auto& lb = item_losses[static_cast<std::size_t>(bi)];
                row.loss += lb.total / bn;
                row.p1 += lb.p1 / bn;
                row.p2 += lb.p2 / bn;
                row.p3 += lb.p3 / bn;
                row.p4 += lb.p4 / bn;
            }
            if (!std::isfinite(row.loss))
                throw DivergenceError("train: non-finite loss at step " + std::to_string(step) +
                                      " (epoch " + std::to_string(epoch) + ")");
            opt.step(model.parameters(), grad.data());
            log.steps.push_back(row);
            epoch_sum += row.loss;
            ++epoch_steps;
            ++step;
        }
        log.epoch_loss.push_back(epoch_sum / std::max(1, epoch_steps));
        if (!val_samples.empty()) {
            const SplitEval ve = evaluate_samples(model, val_samples, 0.5, threads);
            double mean = 0.0;
            for (const auto& se : ve.slices) mean += se.dice;
            log.val_dice.push_back(mean / static_cast<double>(ve.slices.size()));
        }
    }
    return TrainResult{std::move(model), std::move(log)};
}

// ------------------------------------------------------------------------
// Repeated training with consecutive seeds; mean and (sample) standard
// deviation of the test metrics across runs. Failed runs are flagged and the
// remaining runs continue.
// ------------------------------------------------------------------------

struct RunMetrics {
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    double dice = 0.0;
    double hd95 = std::numeric_limits<double>::quiet_NaN();
    double dice_hard = 0.0;
    double dice_easy = 0.0;
};

struct MultiRunReport {
    int n_runs = 0;  // protocol metadata: how many runs were requested
    std::vector<RunMetrics> runs;
    double mean_dice = 0.0, std_dice = 0.0;
    double mean_hd95 = 0.0, std_hd95 = 0.0;
    double mean_dice_hard = 0.0;
    double mean_dice_easy = 0.0;
    int failures = 0;
};

inline MultiRunReport multi_run(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                                const Dataset& dataset, int n_runs,
                                int threads = default_threads()) {
    if (n_runs < 1) throw std::invalid_argument("multi_run: n_runs must be >= 1");
    MultiRunReport report;
    report.n_runs = n_runs;
    std::vector<double> dices, hds, hards, easies;
    for (int k = 0; k < n_runs; ++k) {
        RunMetrics rm;
        rm.seed = train_cfg.seed + static_cast<std::uint64_t>(k);
        try {
            TrainConfig cfg = train_cfg;
            cfg.seed = rm.seed;
            TrainResult res = train(model_cfg, cfg, dataset, threads);
            const SplitEval ev = evaluate_split(res.model, dataset, "test", 0.5, threads);
            rm.ok = true;
            rm.dice = ev.mean_dice;
            rm.hd95 = ev.mean_hd95;
            rm.dice_hard = ev.mean_dice_hard;
            rm.dice_easy = ev.mean_dice_easy;
            dices.push_back(rm.dice);
            if (std::isfinite(rm.hd95)) hds.push_back(rm.hd95);
            hards.push_back(rm.dice_hard);
            easies.push_back(rm.dice_easy);
        } catch (const std::exception& e) {
            rm.ok = false;
            rm.error = e.what();
            ++report.failures;
        }
        report.runs.push_back(std::move(rm));
    }
    const auto mean_of = [](const std::vector<double>& v) {
        double s = 0.0;
        for (const double x : v) s += x;
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    const auto std_of = [&](const std::vector<double>& v, double m) {
        if (v.size() < 2) return 0.0;
        double s = 0.0;
        for (const double x : v) s += (x - m) * (x - m);
        return std::sqrt(s / static_cast<double>(v.size() - 1));
    };
    report.mean_dice = mean_of(dices);
    report.std_dice = std_of(dices, report.mean_dice);
    report.mean_hd95 = mean_of(hds);
    report.std_hd95 = std_of(hds, report.mean_hd95);
    report.mean_dice_hard = mean_of(hards);
    report.mean_dice_easy = mean_of(easies);
    return report;
}

// Training-log CSV: step, epoch, loss, then the four weighted components.
inline std::string train_log_csv(const TrainLog& log) {
    std::string out = "step,epoch,loss,loss_p1,loss_p2,loss_p3,loss_p4\n";
    char buf[160];
    for (const auto& r : log.steps) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.12g,%.12g,%.12g,%.12g,%.12g\n", r.step, r.epoch,
                      r.loss, r.p1, r.p2, r.p3, r.p4);
        out += buf;
    }
    return out;
}

inline std::string val_log_csv(const TrainLog& log) {
    std::string out = "epoch,val_dice\n";
    char buf[64];
    for (std::size_t e = 0; e < log.val_dice.size(); ++e) {
        std::snprintf(buf, sizeof(buf), "%zu,%.12g\n", e, log.val_dice[e]);
        out += buf;
    }
    return out;
}

}  // namespace microsegnet
