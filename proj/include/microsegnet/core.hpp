#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "microsegnet/array2d.hpp"

namespace microsegnet {

// Physical pixel spacing in millimeters per pixel, (row, col).
struct Spacing {
    double row_mm = 0.1;
    double col_mm = 0.1;

    friend bool operator==(const Spacing&, const Spacing&) = default;
};

// Single-channel grayscale image, intensities in [0, 1] once preprocessed.
struct Image2D {
    Array2D<float> pixels;
    Spacing spacing_mm;
    std::string case_id;
    int slice_index = 0;

    int rows() const { return pixels.rows(); }
    int cols() const { return pixels.cols(); }
};

// Per-pixel {0,1} label map. Values outside {0,1} are representable so that
// corrupt data can be loaded and then rejected by validate_case.
struct BinaryMask {
    Array2D<std::uint8_t> labels;
    Spacing spacing_mm;

    int rows() const { return labels.rows(); }
    int cols() const { return labels.cols(); }

    // Number of foreground pixels.
    std::size_t area() const {
        std::size_t n = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) n += (labels.data()[i] == 1);
        return n;
    }
    bool empty_mask() const { return area() == 0; }
};

// Per-pixel predicted foreground probability, strictly inside (0, 1) after
// output clamping.
struct ProbabilityMap {
    Array2D<float> probs;

    int rows() const { return probs.rows(); }
    int cols() const { return probs.cols(); }
};

// Per-pixel loss weights w_i; two-valued by construction (w_easy / w_hard).
struct WeightMap {
    Array2D<double> weights;

    int rows() const { return weights.rows(); }
    int cols() const { return weights.cols(); }
};

// Probability maps at full, 1/2, 1/4 and 1/8 resolution. p2..p4 are only
// materialized when deep supervision is enabled.
struct MultiScalePrediction {
    ProbabilityMap p1;
    std::optional<ProbabilityMap> p2;
    std::optional<ProbabilityMap> p3;
    std::optional<ProbabilityMap> p4;
};

// One patient slice with its annotation pair and the derived artifacts.
struct CaseRecord {
    Image2D image;
    BinaryMask expert_mask;
    BinaryMask nonexpert_mask;
    std::optional<BinaryMask> hard_mask;   // derived: expert XOR non-expert
    std::optional<WeightMap> weight_map;   // derived from hard_mask
    std::string case_id;
    int slice_index = 0;
};

// ------------------------------------------------------------------------
// Configuration
// ------------------------------------------------------------------------

enum class StemMode { kHybrid, kPure };

// Network shape. The paper fixes the raw-image patch size (16) but not the
// transformer width/depth; the presets below declare the reconstruction.
struct ModelConfig {
    int input_size = 224;     // side length after preprocessing
    int patch_size = 16;      // effective patch size on the raw image
    int embed_dim = 128;      // D
    int num_layers = 4;       // L
    int num_heads = 4;
    int stem_channels = 16;   // first stage width C; stages are C, 2C, 4C
    double mlp_ratio = 4.0;   // FFN hidden width / D
    StemMode stem_mode = StemMode::kHybrid;
    std::string preset_name = "tiny";

    int token_grid() const { return input_size / patch_size; }
    int num_tokens() const { return token_grid() * token_grid(); }

    std::vector<std::string> validate() const {
        std::vector<std::string> v;
        if (input_size < 16 || input_size % 16 != 0)
            v.push_back("input_size must be a positive multiple of 16");
        if (patch_size <= 0 || input_size % patch_size != 0)
            v.push_back("patch_size must divide input_size");
        else if (input_size % token_grid() != 0)
            v.push_back("token-grid side must divide input_size");
        if (stem_mode == StemMode::kHybrid && patch_size % 8 != 0)
            v.push_back("hybrid stem requires patch_size divisible by 8");
        if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0)
            v.push_back("embed_dim must be a positive multiple of num_heads");
        if (num_layers <= 0) v.push_back("num_layers must be positive");
        if (stem_channels <= 0) v.push_back("stem_channels must be positive");
        if (mlp_ratio <= 0.0) v.push_back("mlp_ratio must be positive");
        return v;
    }

    void check() const {
        const auto v = validate();
        if (!v.empty()) throw std::invalid_argument("ModelConfig: " + v.front());
    }

    // Desk-scale default.
    static ModelConfig tiny() { return ModelConfig{}; }

    // ViT-scale reconstruction of the configuration the paper builds on.
    // The paper states only the patch size; width, depth and head count
    // follow the ViT-Base lineage and are not trained in CI.
    static ModelConfig paper() {
        ModelConfig c;
        c.embed_dim = 768;
        c.num_layers = 12;
        c.num_heads = 12;
        c.stem_channels = 32;
        c.preset_name = "paper";
        return c;
    }

    static ModelConfig preset(const std::string& name) {
        if (name == "tiny") return tiny();
        if (name == "paper") return paper();
        throw std::invalid_argument("unknown preset: " + name);
    }
};

// Optimization protocol. Defaults mirror the published training recipe:
// SGD, batch 8, learning rate 0.01, momentum 0.9, weight decay 1e-4,
// 10 epochs, 8 repeated runs, hard/easy weights 12/1.
struct TrainConfig {
    int batch_size = 8;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int epochs = 10;
    int num_runs = 8;
    double w_hard = 12.0;
    double w_easy = 1.0;
    bool deep_supervision = true;
    std::uint64_t seed = 0;

    std::vector<std::string> validate() const {
        std::vector<std::string> v;
        if (batch_size <= 0) v.push_back("batch_size must be positive");
        if (learning_rate <= 0.0) v.push_back("learning_rate must be positive");
        if (momentum < 0.0) v.push_back("momentum must be non-negative");
        if (weight_decay < 0.0) v.push_back("weight_decay must be non-negative");
        if (epochs <= 0) v.push_back("epochs must be positive");
        if (num_runs <= 0) v.push_back("num_runs must be positive");
        if (!(w_hard >= w_easy && w_easy >= 1.0))
            v.push_back("weights must satisfy w_hard >= w_easy >= 1");
        return v;
    }

    void check() const {
        const auto v = validate();
        if (!v.empty()) throw std::invalid_argument("TrainConfig: " + v.front());
    }
};

// ------------------------------------------------------------------------
// Record validation
// ------------------------------------------------------------------------

namespace detail {

inline void check_mask(const BinaryMask& mask, const Image2D& image,
                       const std::string& field, std::vector<std::string>& out) {
    if (mask.rows() != image.rows() || mask.cols() != image.cols()) {
        out.push_back(field + ": shape mismatch (" + std::to_string(mask.rows()) + "x" +
                      std::to_string(mask.cols()) + " vs image " + std::to_string(image.rows()) +
                      "x" + std::to_string(image.cols()) + ")");
        return;
    }
    for (int r = 0; r < mask.rows(); ++r)
        for (int c = 0; c < mask.cols(); ++c) {
            const auto v = mask.labels(r, c);
            if (v != 0 && v != 1) {
                out.push_back(field + ": labels not binary at (" + std::to_string(r) + "," +
                              std::to_string(c) + ")");
                return;  // one offending pixel is enough to name the violation
            }
        }
}

}  // namespace detail

// Pure, deterministic invariant check. Returns one description per violated
// invariant; empty means the record is admissible. Violations are data, not
// exceptions. `expected_size` > 0 additionally enforces the preprocessed
// H = W = input_size contract.
inline std::vector<std::string> validate_case(const CaseRecord& record, int expected_size = 0) {
    std::vector<std::string> v;
    const Image2D& img = record.image;

    if (img.rows() < 8 || img.cols() < 8) v.push_back("image: H and W must be >= 8");
    if (expected_size > 0 && (img.rows() != expected_size || img.cols() != expected_size))
        v.push_back("image: expected " + std::to_string(expected_size) + "x" +
                    std::to_string(expected_size) + " after preprocessing");
    if (!(img.spacing_mm.row_mm > 0.0) || !(img.spacing_mm.col_mm > 0.0))
        v.push_back("image: spacing_mm must be strictly positive");
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        const float p = img.pixels.data()[i];
        if (!(p >= 0.0f && p <= 1.0f)) {
            v.push_back("image: intensity outside [0,1]");
            break;
        }
    }

    detail::check_mask(record.expert_mask, img, "expert_mask", v);
    detail::check_mask(record.nonexpert_mask, img, "nonexpert_mask", v);
    if (record.hard_mask) detail::check_mask(*record.hard_mask, img, "hard_mask", v);

    if (record.weight_map) {
        const WeightMap& w = *record.weight_map;
        if (w.rows() != img.rows() || w.cols() != img.cols()) {
            v.push_back("weight_map: shape mismatch");
        } else {
            double lo = 0.0, hi = 0.0;
            bool seen = false;
            bool two_valued = true;
            for (std::size_t i = 0; i < w.weights.size(); ++i) {
                const double x = w.weights.data()[i];
                if (x < 1.0) {
                    v.push_back("weight_map: weight < 1");
                    break;
                }
                if (!seen) {
                    lo = hi = x;
                    seen = true;
                } else if (x != lo && x != hi) {
                    if (lo == hi) {
                        (x < lo ? lo : hi) = x;
                    } else {
                        two_valued = false;
                        break;
                    }
                }
            }
            if (!two_valued) v.push_back("weight_map: more than two distinct values");
        }
    }
    return v;
}

// ------------------------------------------------------------------------
// Plain-text key-value configuration files
// ------------------------------------------------------------------------

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

// `key = value` lines, '#' starts a comment.
inline std::map<std::string, std::string> parse_config_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw std::runtime_error("config line " + std::to_string(lineno) + ": empty key");
        kv[key] = value;
    }
    return kv;
}

inline std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

namespace detail {

inline bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw std::runtime_error("not a boolean: " + s);
}

}  // namespace detail

// Applies config-file keys onto the two config structs. Keys mirror the
// field names; unknown keys are an error so typos do not silently pass.
inline void apply_config(const std::map<std::string, std::string>& kv, ModelConfig& model,
                         TrainConfig& train) {
    // The preset is a baseline: apply it first so explicit keys override it.
    if (auto it = kv.find("preset"); it != kv.end()) model = ModelConfig::preset(it->second);
    for (const auto& [key, value] : kv) {
        try {
            if (key == "preset") continue;
            else if (key == "input_size") model.input_size = std::stoi(value);
            else if (key == "patch_size") model.patch_size = std::stoi(value);
            else if (key == "embed_dim") model.embed_dim = std::stoi(value);
            else if (key == "num_layers") model.num_layers = std::stoi(value);
            else if (key == "num_heads") model.num_heads = std::stoi(value);
            else if (key == "stem_channels") model.stem_channels = std::stoi(value);
            else if (key == "mlp_ratio") model.mlp_ratio = std::stod(value);
            else if (key == "stem_mode") {
                if (value == "hybrid") model.stem_mode = StemMode::kHybrid;
                else if (value == "pure") model.stem_mode = StemMode::kPure;
                else throw std::runtime_error("stem_mode must be hybrid or pure");
            }
            else if (key == "batch_size") train.batch_size = std::stoi(value);
            else if (key == "learning_rate") train.learning_rate = std::stod(value);
            else if (key == "momentum") train.momentum = std::stod(value);
            else if (key == "weight_decay") train.weight_decay = std::stod(value);
            else if (key == "epochs") train.epochs = std::stoi(value);
            else if (key == "num_runs") train.num_runs = std::stoi(value);
            else if (key == "w_hard") train.w_hard = std::stod(value);
            else if (key == "w_easy") train.w_easy = std::stod(value);
            else if (key == "deep_supervision") train.deep_supervision = detail::parse_bool(value);
            else if (key == "seed") train.seed = std::stoull(value);
            else throw std::runtime_error("unknown config key");
        } catch (const std::exception& e) {
            throw std::runtime_error("config key '" + key + "': " + e.what());
        }
    }
}

}  // namespace microsegnet
