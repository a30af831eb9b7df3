#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "microsegnet/core.hpp"
#include "microsegnet/losses.hpp"
#include "microsegnet/nn.hpp"
#include "microsegnet/rng.hpp"

namespace microsegnet {

inline constexpr const char* kCheckpointFormat = "microsegnet-ckpt-v1";

// Stem outputs: skip features at 1/2, 1/4 and 1/8 of the input side plus the
// deep feature map handed to tokenization (the 1/8 map in hybrid mode).
struct StemFeatures {
    nn::Feat skip2;  // C   @ S/2
    nn::Feat skip4;  // 2C  @ S/4
    nn::Feat skip8;  // 4C  @ S/8
};

// Training metadata carried inside a checkpoint.
struct CheckpointMeta {
    int epoch = 0;
    std::uint64_t seed = 0;
    std::vector<double> loss_curve;  // mean training loss per epoch
    double w_hard = 12.0;
    double w_easy = 1.0;
    bool deep_supervision = true;
};

// The segmentation network: convolutional stem with skip outputs, patch
// embedding with a learned positional table, transformer encoder, UNet-style
// decoder with 2x bilinear upsampling and skip fusion, and four 1x1-conv +
// sigmoid supervision heads at scales 1, 1/2, 1/4, 1/8.
class MicroSegNet {
public:
    explicit MicroSegNet(const ModelConfig& cfg, std::uint64_t init_seed = 0) : cfg_(cfg) {
        cfg_.check();
        const int c = cfg_.stem_channels;
        const int d = cfg_.embed_dim;
        const int hidden = static_cast<int>(cfg_.mlp_ratio * d + 0.5);
        c_last_ = std::max(c / 2, 4);

        const auto groups_for = [](int channels) {
            for (const int g : {8, 4, 2})
                if (channels % g == 0 && channels >= g) return g;
            return 1;
        };
        stem1_ = nn::Conv2d(reg_, "stem.conv1", 1, c, 3, 2, 1);
        stem1_gn_ = nn::GroupNorm(reg_, "stem.conv1.gn", c, groups_for(c));
        stem2_ = nn::Conv2d(reg_, "stem.conv2", c, 2 * c, 3, 2, 1);
        stem2_gn_ = nn::GroupNorm(reg_, "stem.conv2.gn", 2 * c, groups_for(2 * c));
        stem3_ = nn::Conv2d(reg_, "stem.conv3", 2 * c, 4 * c, 3, 2, 1);
        stem3_gn_ = nn::GroupNorm(reg_, "stem.conv3.gn", 4 * c, groups_for(4 * c));

        if (cfg_.stem_mode == StemMode::kHybrid) {
            const int kp = cfg_.patch_size / 8;  // patches on the 1/8 feature map
            patch_ = nn::Conv2d(reg_, "embed.proj", 4 * c, d, kp, kp, 0);
        } else {
            patch_ = nn::Conv2d(reg_, "embed.proj", 1, d, cfg_.patch_size, cfg_.patch_size, 0);
        }
        pos_off_ = reg_.add("embed.pos", {cfg_.num_tokens(), d});

        layers_.reserve(static_cast<std::size_t>(cfg_.num_layers));
        for (int l = 0; l < cfg_.num_layers; ++l) {
            const std::string p = "enc." + std::to_string(l);
            layers_.push_back(EncoderLayer{
                nn::LayerNorm(reg_, p + ".ln1", d),
                nn::Attention(reg_, p + ".attn", d, cfg_.num_heads),
                nn::LayerNorm(reg_, p + ".ln2", d),
                nn::Ffn(reg_, p + ".ffn", d, hidden),
            });
        }
        lnf_ = nn::LayerNorm(reg_, "enc.final_ln", d);

        neck_ = nn::Conv2d(reg_, "dec.neck", d, 4 * c, 3, 1, 1);
        neck_gn_ = nn::GroupNorm(reg_, "dec.neck.gn", 4 * c, groups_for(4 * c));
        dec8_ = nn::Conv2d(reg_, "dec.s8", 8 * c, 4 * c, 3, 1, 1);
        dec8_gn_ = nn::GroupNorm(reg_, "dec.s8.gn", 4 * c, groups_for(4 * c));
        dec4_ = nn::Conv2d(reg_, "dec.s4", 6 * c, 2 * c, 3, 1, 1);
        dec4_gn_ = nn::GroupNorm(reg_, "dec.s4.gn", 2 * c, groups_for(2 * c));
        dec2_ = nn::Conv2d(reg_, "dec.s2", 3 * c, c, 3, 1, 1);
        dec2_gn_ = nn::GroupNorm(reg_, "dec.s2.gn", c, groups_for(c));
        dec1_ = nn::Conv2d(reg_, "dec.s1", c, c_last_, 3, 1, 1);
        dec1_gn_ = nn::GroupNorm(reg_, "dec.s1.gn", c_last_, groups_for(c_last_));
        head4_ = nn::Conv2d(reg_, "head.p4", 4 * c, 1, 1, 1, 0);
        head3_ = nn::Conv2d(reg_, "head.p3", 2 * c, 1, 1, 1, 0);
        head2_ = nn::Conv2d(reg_, "head.p2", c, 1, 1, 1, 0);
        head1_ = nn::Conv2d(reg_, "head.p1", c_last_, 1, 1, 1, 0);

        theta_.assign(reg_.total(), 0.0f);
        initialize(init_seed);
    }

    const ModelConfig& config() const { return cfg_; }
    std::size_t parameter_count() const { return theta_.size(); }
    const nn::ParamRegistry& registry() const { return reg_; }
    float* parameters() { return theta_.data(); }
    const float* parameters() const { return theta_.data(); }

    // Mutable view of one named tensor (test hooks: zeroing projections,
    // saturating a head bias).
    float* param_data(const std::string& name, std::size_t* size = nullptr) {
        const nn::ParamView* v = reg_.find(name);
        if (!v) throw std::invalid_argument("no parameter named " + name);
        if (size) *size = v->size;
        return theta_.data() + v->offset;
    }

    // ------------------------------------------------------------------
    // Forward pieces (public contracts)
    // ------------------------------------------------------------------

    static nn::Feat image_to_feat(const Image2D& image) {
        nn::Feat x(1, image.rows(), image.cols());
        std::memcpy(x.m.data(), image.pixels.data(), sizeof(float) * image.pixels.size());
        return x;
    }

    // Low-level feature extraction; skips at 1/2, 1/4, 1/8 of the input side.
    StemFeatures conv_stem(const Image2D& image) const {
        if (image.rows() % 16 != 0 || image.cols() % 16 != 0)
            throw std::invalid_argument("conv_stem: input side must be divisible by 16");
        return stem_fwd(image_to_feat(image), nullptr);
    }

    // z0: linear projection of patches plus the positional table, N x D rows.
    nn::Mat patch_embed(const nn::Feat& features) const { return embed_fwd(features, nullptr); }

    // L pre-norm residual layers: z' = MHSA(LN(z)) + z; z = FFN(LN(z')) + z'.
    nn::Mat transformer_encoder(const nn::Mat& z0) const {
        if (z0.rows() != cfg_.num_tokens() || z0.cols() != cfg_.embed_dim)
            throw std::invalid_argument("transformer_encoder: token shape mismatch");
        return encoder_fwd(z0, nullptr);
    }

    // Cascaded upsampling 1/16 -> 1/8 -> 1/4 -> 1/2 -> 1 with skip fusion and
    // sigmoid heads. P2..P4 are materialized only under deep supervision.
    MultiScalePrediction decode(const nn::Mat& tokens, const StemFeatures& skips,
                                bool deep_supervision) const {
        return decode_fwd(tokens, skips, deep_supervision, nullptr);
    }

    MultiScalePrediction forward(const Image2D& image, bool deep_supervision = true) const {
        return forward_impl(image, deep_supervision, nullptr);
    }

    // ------------------------------------------------------------------
    // Training path
    // ------------------------------------------------------------------

    struct LayerCache {
        nn::LayerNorm::Cache ln1, ln2;
        nn::Attention::Cache attn;
        nn::Ffn::Cache ffn;
    };

    struct Cache {
        bool ds = false;
        nn::Feat x0;
        nn::Feat s1, s2, s3;           // stem post-ReLU activations
        nn::GroupNorm::Cache gn_s1, gn_s2, gn_s3;
        std::vector<LayerCache> layers;
        nn::LayerNorm::Cache lnf;
        nn::Mat tokens_enc;            // encoder output (pre final LN input is implicit)
        nn::Feat tok_grid;             // D @ S/16, input to the neck conv
        nn::Feat neck_a;
        nn::Feat cat8, a8, cat4, a4, cat2, a2, up1, a1;
        nn::GroupNorm::Cache gn_neck, gn8, gn4, gn2, gn1;
    };

    // Per-head gradients with respect to the head logits (dL/dz). Absent
    // optionals mean the head did not participate in the loss.
    struct HeadGrads {
        nn::Feat g1;
        std::optional<nn::Feat> g2, g3, g4;
    };

    MultiScalePrediction forward_train(const Image2D& image, bool deep_supervision,
                                       Cache& cache) const {
        Cache* c = &cache;
        return forward_impl(image, deep_supervision, c);
    }

    // Accumulates parameter gradients into `grad` (size parameter_count()).
    void backward(const Cache& cache, const HeadGrads& dz, float* grad) const {
        // -- heads and decoder --
        nn::Feat da1 = head1_.backward(theta_.data(), cache.a1, dz.g1, grad);
        da1 = nn::relu_backward(cache.a1, da1);
        da1 = dec1_gn_.backward(theta_.data(), cache.gn1, da1, grad);
        nn::Feat dup1 = dec1_.backward(theta_.data(), cache.up1, da1, grad);
        nn::Feat da2 = nn::upsample2x_backward(dup1, cache.a2.h, cache.a2.w);
        if (dz.g2) {
            nn::Feat h = head2_.backward(theta_.data(), cache.a2, *dz.g2, grad);
            da2.m += h.m;
        }
        da2 = nn::relu_backward(cache.a2, da2);
        da2 = dec2_gn_.backward(theta_.data(), cache.gn2, da2, grad);
        nn::Feat dcat2 = dec2_.backward(theta_.data(), cache.cat2, da2, grad);
        nn::Feat dup2{2 * cfg_.stem_channels, cache.a4.h * 2, cache.a4.w * 2};
        dup2.m = dcat2.m.topRows(2 * cfg_.stem_channels);
        nn::Feat dskip2{cfg_.stem_channels, dup2.h, dup2.w};
        dskip2.m = dcat2.m.bottomRows(cfg_.stem_channels);
        nn::Feat da4 = nn::upsample2x_backward(dup2, cache.a4.h, cache.a4.w);
        if (dz.g3) {
            nn::Feat h = head3_.backward(theta_.data(), cache.a4, *dz.g3, grad);
            da4.m += h.m;
        }
        da4 = nn::relu_backward(cache.a4, da4);
        da4 = dec4_gn_.backward(theta_.data(), cache.gn4, da4, grad);
        nn::Feat dcat4 = dec4_.backward(theta_.data(), cache.cat4, da4, grad);
        nn::Feat dup4{4 * cfg_.stem_channels, cache.a8.h * 2, cache.a8.w * 2};
        dup4.m = dcat4.m.topRows(4 * cfg_.stem_channels);
        nn::Feat dskip4{2 * cfg_.stem_channels, dup4.h, dup4.w};
        dskip4.m = dcat4.m.bottomRows(2 * cfg_.stem_channels);
        nn::Feat da8 = nn::upsample2x_backward(dup4, cache.a8.h, cache.a8.w);
        if (dz.g4) {
            nn::Feat h = head4_.backward(theta_.data(), cache.a8, *dz.g4, grad);
            da8.m += h.m;
        }
        da8 = nn::relu_backward(cache.a8, da8);
        da8 = dec8_gn_.backward(theta_.data(), cache.gn8, da8, grad);
        nn::Feat dcat8 = dec8_.backward(theta_.data(), cache.cat8, da8, grad);
        nn::Feat dneck_up{4 * cfg_.stem_channels, cache.neck_a.h * 2, cache.neck_a.w * 2};
        dneck_up.m = dcat8.m.topRows(4 * cfg_.stem_channels);
        nn::Feat dskip8{4 * cfg_.stem_channels, dneck_up.h, dneck_up.w};
        dskip8.m = dcat8.m.bottomRows(4 * cfg_.stem_channels);
        nn::Feat dneck_a = nn::upsample2x_backward(dneck_up, cache.neck_a.h, cache.neck_a.w);
        dneck_a = nn::relu_backward(cache.neck_a, dneck_a);
        dneck_a = neck_gn_.backward(theta_.data(), cache.gn_neck, dneck_a, grad);
        nn::Feat dtok_grid = neck_.backward(theta_.data(), cache.tok_grid, dneck_a, grad);

        // -- tokens --
        const int n = cfg_.num_tokens();
        const int d = cfg_.embed_dim;
        nn::Mat dtok(n, d);
        for (int t = 0; t < n; ++t) dtok.row(t) = dtok_grid.m.col(t).transpose();

        dtok = lnf_.backward(theta_.data(), cache.lnf, dtok, grad);
        for (int l = cfg_.num_layers - 1; l >= 0; --l) {
            const LayerCache& lc = cache.layers[static_cast<std::size_t>(l)];
            const EncoderLayer& layer = layers_[static_cast<std::size_t>(l)];
            // x2 = x1 + FFN(LN2(x1))
            nn::Mat dffn_in = layer.ffn.backward(theta_.data(), lc.ffn, dtok, grad);
            dtok += layer.ln2.backward(theta_.data(), lc.ln2, dffn_in, grad);
            // x1 = x + MHSA(LN1(x))
            nn::Mat dattn_in = layer.attn.backward(theta_.data(), lc.attn, dtok, grad);
            dtok += layer.ln1.backward(theta_.data(), lc.ln1, dattn_in, grad);
        }

        // positional table
        Eigen::Map<nn::Mat> dpos(grad + pos_off_, n, d);
        dpos += dtok;

        // patch projection back to the stem (hybrid) or the raw image (pure)
        const int g = cfg_.token_grid();
        nn::Feat dpatch_out(d, g, g);
        for (int t = 0; t < n; ++t) dpatch_out.m.col(t) = dtok.row(t).transpose();
        const nn::Feat& patch_in = cfg_.stem_mode == StemMode::kHybrid ? cache.s3 : cache.x0;
        nn::Feat dpatch_in = patch_.backward(theta_.data(), patch_in, dpatch_out, grad);

        // -- stem --
        nn::Feat ds3 = dskip8;
        if (cfg_.stem_mode == StemMode::kHybrid) ds3.m += dpatch_in.m;
        ds3 = nn::relu_backward(cache.s3, ds3);
        ds3 = stem3_gn_.backward(theta_.data(), cache.gn_s3, ds3, grad);
        nn::Feat ds2 = stem3_.backward(theta_.data(), cache.s2, ds3, grad);
        ds2.m += dskip4.m;
        ds2 = nn::relu_backward(cache.s2, ds2);
        ds2 = stem2_gn_.backward(theta_.data(), cache.gn_s2, ds2, grad);
        nn::Feat ds1 = stem2_.backward(theta_.data(), cache.s1, ds2, grad);
        ds1.m += dskip2.m;
        ds1 = nn::relu_backward(cache.s1, ds1);
        ds1 = stem1_gn_.backward(theta_.data(), cache.gn_s1, ds1, grad);
        stem1_.backward(theta_.data(), cache.x0, ds1, grad);  // input gradient unused
    }

    // ------------------------------------------------------------------
    // Checkpoints
    // ------------------------------------------------------------------

    void save_checkpoint(const std::string& path, const CheckpointMeta& meta) const {
        nlohmann::json header;
        header["config"] = config_to_json(cfg_);
        header["metadata"] = {
            {"epoch", meta.epoch},
            {"seed", meta.seed},
            {"loss_curve", meta.loss_curve},
            {"w_hard", meta.w_hard},
            {"w_easy", meta.w_easy},
            {"deep_supervision", meta.deep_supervision},
        };
        nlohmann::json tensors = nlohmann::json::array();
        for (const auto& v : reg_.views())
            tensors.push_back({{"name", v.name}, {"shape", v.shape}});
        header["tensors"] = std::move(tensors);
        const std::string hs = header.dump();

        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
        out << kCheckpointFormat << "\n";
        const std::uint64_t len = hs.size();
        out.write(reinterpret_cast<const char*>(&len), sizeof(len));
        out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
        out.write(reinterpret_cast<const char*>(theta_.data()),
                  static_cast<std::streamsize>(theta_.size() * sizeof(float)));
        if (!out) throw std::runtime_error("checkpoint write failed: " + path);
    }

    static MicroSegNet load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
        std::string magic;
        std::getline(in, magic);
        if (magic != kCheckpointFormat)
            throw std::runtime_error("not a " + std::string(kCheckpointFormat) + " file: " + path);
        std::uint64_t len = 0;
        in.read(reinterpret_cast<char*>(&len), sizeof(len));
        std::string hs(len, '\0');
        in.read(hs.data(), static_cast<std::streamsize>(len));
        if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
        const nlohmann::json header = nlohmann::json::parse(hs);

        MicroSegNet model(config_from_json(header.at("config")));
        const auto& tensors = header.at("tensors");
        const auto& views = model.reg_.views();
        if (tensors.size() != views.size())
            throw std::runtime_error("checkpoint/config mismatch: tensor count differs");
        for (std::size_t i = 0; i < views.size(); ++i) {
            if (tensors[i].at("name").get<std::string>() != views[i].name ||
                tensors[i].at("shape").get<std::vector<int>>() != views[i].shape)
                throw std::runtime_error("checkpoint/config mismatch at tensor " + views[i].name);
        }
        in.read(reinterpret_cast<char*>(model.theta_.data()),
                static_cast<std::streamsize>(model.theta_.size() * sizeof(float)));
        if (!in) throw std::runtime_error("truncated checkpoint data: " + path);
        if (meta) {
            const auto& m = header.at("metadata");
            meta->epoch = m.at("epoch").get<int>();
            meta->seed = m.at("seed").get<std::uint64_t>();
            meta->loss_curve = m.at("loss_curve").get<std::vector<double>>();
            meta->w_hard = m.at("w_hard").get<double>();
            meta->w_easy = m.at("w_easy").get<double>();
            meta->deep_supervision = m.at("deep_supervision").get<bool>();
        }
        return model;
    }

    static nlohmann::json config_to_json(const ModelConfig& c) {
        return {
            {"input_size", c.input_size},   {"patch_size", c.patch_size},
            {"embed_dim", c.embed_dim},     {"num_layers", c.num_layers},
            {"num_heads", c.num_heads},     {"stem_channels", c.stem_channels},
            {"mlp_ratio", c.mlp_ratio},
            {"stem_mode", c.stem_mode == StemMode::kHybrid ? "hybrid" : "pure"},
            {"preset_name", c.preset_name},
        };
    }

    static ModelConfig config_from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.input_size = j.at("input_size").get<int>();
        c.patch_size = j.at("patch_size").get<int>();
        c.embed_dim = j.at("embed_dim").get<int>();
        c.num_layers = j.at("num_layers").get<int>();
        c.num_heads = j.at("num_heads").get<int>();
        c.stem_channels = j.at("stem_channels").get<int>();
        c.mlp_ratio = j.at("mlp_ratio").get<double>();
        c.stem_mode = j.at("stem_mode").get<std::string>() == "pure" ? StemMode::kPure
                                                                     : StemMode::kHybrid;
        c.preset_name = j.at("preset_name").get<std::string>();
        return c;
    }

private:
    struct EncoderLayer {
        nn::LayerNorm ln1;
        nn::Attention attn;
        nn::LayerNorm ln2;
        nn::Ffn ffn;
    };

    StemFeatures stem_fwd(const nn::Feat& x0, Cache* c) const {
        StemFeatures sf;
        nn::Feat a1 = stem1_gn_.forward(theta_.data(), stem1_.forward(theta_.data(), x0),
                                        c ? &c->gn_s1 : nullptr);
        nn::relu_inplace(a1);
        nn::Feat a2 = stem2_gn_.forward(theta_.data(), stem2_.forward(theta_.data(), a1),
                                        c ? &c->gn_s2 : nullptr);
        nn::relu_inplace(a2);
        nn::Feat a3 = stem3_gn_.forward(theta_.data(), stem3_.forward(theta_.data(), a2),
                                        c ? &c->gn_s3 : nullptr);
        nn::relu_inplace(a3);
        if (c) {
            c->x0 = x0;
            c->s1 = a1;
            c->s2 = a2;
            c->s3 = a3;
        }
        sf.skip2 = std::move(a1);
        sf.skip4 = std::move(a2);
        sf.skip8 = std::move(a3);
        return sf;
    }

    nn::Mat embed_fwd(const nn::Feat& patch_in, Cache* /*c*/) const {
        if (patch_in.h % patch_.k != 0 || patch_in.w % patch_.k != 0)
            throw std::invalid_argument("patch_embed: feature side not divisible by patch size");
        const nn::Feat po = patch_.forward(theta_.data(), patch_in);
        const int n = po.pixels();
        if (n != cfg_.num_tokens())
            throw std::invalid_argument("patch_embed: token count mismatch with config");
        nn::Mat z(n, cfg_.embed_dim);
        for (int t = 0; t < n; ++t) z.row(t) = po.m.col(t).transpose();
        const Eigen::Map<const nn::Mat> pos(theta_.data() + pos_off_, n, cfg_.embed_dim);
        z += pos;
        return z;
    }

    nn::Mat encoder_fwd(nn::Mat z, Cache* c) const {
        for (int l = 0; l < cfg_.num_layers; ++l) {
            const EncoderLayer& layer = layers_[static_cast<std::size_t>(l)];
            LayerCache* lc = c ? &c->layers[static_cast<std::size_t>(l)] : nullptr;
            nn::Mat h = layer.ln1.forward(theta_.data(), z, lc ? &lc->ln1 : nullptr);
            z += layer.attn.forward(theta_.data(), h, lc ? &lc->attn : nullptr);
            nn::Mat h2 = layer.ln2.forward(theta_.data(), z, lc ? &lc->ln2 : nullptr);
            z += layer.ffn.forward(theta_.data(), h2, lc ? &lc->ffn : nullptr);
        }
        return z;
    }

    static ProbabilityMap to_prob(const nn::Feat& z) {
        ProbabilityMap p;
        p.probs = Array2D<float>(z.h, z.w);
        constexpr float lo = 1e-7f;
        constexpr float hi = 1.0f - 1e-7f;
        for (int i = 0; i < z.pixels(); ++i) {
            float v = nn::sigmoid(z.m(0, i));
            v = v < lo ? lo : (v > hi ? hi : v);
            p.probs.data()[i] = v;
        }
        return p;
    }

    MultiScalePrediction decode_fwd(const nn::Mat& tokens, const StemFeatures& sf, bool ds,
                                    Cache* c) const {
        const int g = cfg_.token_grid();
        const int d = cfg_.embed_dim;
        nn::Mat t = lnf_.forward(theta_.data(), tokens, c ? &c->lnf : nullptr);
        nn::Feat grid(d, g, g);
        const int n_tok = static_cast<int>(t.rows());
        for (int i = 0; i < n_tok; ++i) grid.m.col(i) = t.row(i).transpose();

        nn::Feat neck = neck_gn_.forward(theta_.data(), neck_.forward(theta_.data(), grid),
                                         c ? &c->gn_neck : nullptr);
        nn::relu_inplace(neck);

        nn::Feat cat8 = nn::concat_channels(nn::upsample2x(neck), sf.skip8);
        nn::Feat a8 = dec8_gn_.forward(theta_.data(), dec8_.forward(theta_.data(), cat8),
                                       c ? &c->gn8 : nullptr);
        nn::relu_inplace(a8);

        nn::Feat cat4 = nn::concat_channels(nn::upsample2x(a8), sf.skip4);
        nn::Feat a4 = dec4_gn_.forward(theta_.data(), dec4_.forward(theta_.data(), cat4),
                                       c ? &c->gn4 : nullptr);
        nn::relu_inplace(a4);

        nn::Feat cat2 = nn::concat_channels(nn::upsample2x(a4), sf.skip2);
        nn::Feat a2 = dec2_gn_.forward(theta_.data(), dec2_.forward(theta_.data(), cat2),
                                       c ? &c->gn2 : nullptr);
        nn::relu_inplace(a2);

        nn::Feat up1 = nn::upsample2x(a2);
        nn::Feat a1 = dec1_gn_.forward(theta_.data(), dec1_.forward(theta_.data(), up1),
                                       c ? &c->gn1 : nullptr);
        nn::relu_inplace(a1);

        MultiScalePrediction pred;
        pred.p1 = to_prob(head1_.forward(theta_.data(), a1));
        if (ds) {
            pred.p2 = to_prob(head2_.forward(theta_.data(), a2));
            pred.p3 = to_prob(head3_.forward(theta_.data(), a4));
            pred.p4 = to_prob(head4_.forward(theta_.data(), a8));
        }
        if (c) {
            c->ds = ds;
            c->tok_grid = std::move(grid);
            c->neck_a = std::move(neck);
            c->cat8 = std::move(cat8);
            c->a8 = std::move(a8);
            c->cat4 = std::move(cat4);
            c->a4 = std::move(a4);
            c->cat2 = std::move(cat2);
            c->a2 = std::move(a2);
            c->up1 = std::move(up1);
            c->a1 = std::move(a1);
        }
        return pred;
    }

    MultiScalePrediction forward_impl(const Image2D& image, bool ds, Cache* c) const {
        if (image.rows() != cfg_.input_size || image.cols() != cfg_.input_size)
            throw std::invalid_argument("forward: image size does not match config.input_size");
        if (c) c->layers.resize(static_cast<std::size_t>(cfg_.num_layers));
        const nn::Feat x0 = image_to_feat(image);
        StemFeatures sf = stem_fwd(x0, c);
        const nn::Feat& patch_in = cfg_.stem_mode == StemMode::kHybrid ? sf.skip8 : x0;
        nn::Mat z = embed_fwd(patch_in, c);
        z = encoder_fwd(std::move(z), c);
        if (c) c->tokens_enc = z;
        return decode_fwd(z, sf, ds, c);
    }

    ModelConfig cfg_;
    int c_last_ = 8;
    nn::ParamRegistry reg_;
    std::vector<float> theta_;

    nn::Conv2d stem1_, stem2_, stem3_;
    nn::GroupNorm stem1_gn_, stem2_gn_, stem3_gn_;
    nn::Conv2d patch_;
    std::size_t pos_off_ = 0;
    std::vector<EncoderLayer> layers_;
    nn::LayerNorm lnf_;
    nn::Conv2d neck_, dec8_, dec4_, dec2_, dec1_;
    nn::GroupNorm neck_gn_, dec8_gn_, dec4_gn_, dec2_gn_, dec1_gn_;
    nn::Conv2d head4_, head3_, head2_, head1_;

    void initialize(std::uint64_t seed) {
        Rng rng = Rng::for_stream(seed, 0x1417u);
        for (const auto& v : reg_.views()) {
            float* p = theta_.data() + v.offset;
            if (v.name.ends_with(".g")) {
                // layer-norm scales
                for (std::size_t i = 0; i < v.size; ++i) p[i] = 1.0f;
            } else if (v.name.ends_with(".b")) {
                // biases and LN shifts start at zero (head biases included)
                std::memset(p, 0, v.size * sizeof(float));
            } else if (v.name == "embed.pos" || v.name.starts_with("enc.") ||
                       v.name.starts_with("embed.") || v.name.starts_with("head.")) {
                for (std::size_t i = 0; i < v.size; ++i)
                    p[i] = static_cast<float>(rng.truncated_normal(0.02));
            } else {
                // stem/decoder convolutions: He-scaled truncated normal
                const int fan_in = v.shape.size() == 2 ? v.shape[1] : 1;
                const double std_dev = std::sqrt(2.0 / fan_in);
                for (std::size_t i = 0; i < v.size; ++i)
                    p[i] = static_cast<float>(rng.truncated_normal(std_dev));
            }
        }
    }
};

}  // namespace microsegnet
