#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "microsegnet/image_io.hpp"
#include "microsegnet/model.hpp"
#include "microsegnet/trainer.hpp"
#include "test_util.hpp"

using namespace microsegnet;
using msn_test::make_mask;
using msn_test::random_mask;
using msn_test::weights_from_mask;

namespace {

ModelConfig micro_config() {
    ModelConfig c;
    c.input_size = 32;
    c.patch_size = 16;
    c.embed_dim = 16;
    c.num_layers = 1;
    c.num_heads = 2;
    c.stem_channels = 4;
    c.mlp_ratio = 2.0;
    c.preset_name = "micro-test";
    return c;
}

Image2D random_image(int n, std::uint64_t seed, Spacing sp = {0.1, 0.1}) {
    Rng rng(seed);
    Image2D img;
    img.pixels = Array2D<float>(n, n);
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        img.pixels.data()[i] = static_cast<float>(rng.uniform());
    img.spacing_mm = sp;
    img.case_id = "rnd";
    return img;
}

void check_open_interval(const ProbabilityMap& p) {
    for (std::size_t i = 0; i < p.probs.size(); ++i) {
        REQUIRE(p.probs.data()[i] > 0.0f);
        REQUIRE(p.probs.data()[i] < 1.0f);
    }
}

}  // namespace

TEST_CASE("forward shape and range contract at 224 with the tiny preset", "[model]") {
    const ModelConfig cfg = ModelConfig::tiny();
    MicroSegNet model(cfg, 1);
    const auto img = random_image(224, 5);
    const auto pred = model.forward(img, true);

    REQUIRE(pred.p1.rows() == 224);
    REQUIRE(pred.p2);
    REQUIRE(pred.p2->rows() == 112);
    REQUIRE(pred.p3->rows() == 56);
    REQUIRE(pred.p4->rows() == 28);
    check_open_interval(pred.p1);
    check_open_interval(*pred.p2);
    check_open_interval(*pred.p3);
    check_open_interval(*pred.p4);

    SECTION("inference is deterministic") {
        const auto again = model.forward(img, true);
        REQUIRE(again.p1.probs == pred.p1.probs);
        REQUIRE(again.p4->probs == pred.p4->probs);
    }

    SECTION("deep supervision off materializes only P1") {
        const auto p1_only = model.forward(img, false);
        REQUIRE_FALSE(p1_only.p2.has_value());
        REQUIRE_FALSE(p1_only.p3.has_value());
        REQUIRE_FALSE(p1_only.p4.has_value());
        REQUIRE(p1_only.p1.probs == pred.p1.probs);
    }
}

TEST_CASE("conv_stem stride bookkeeping", "[model]") {
    const ModelConfig cfg = micro_config();
    MicroSegNet model(cfg, 2);

    const auto sf32 = model.conv_stem(random_image(32, 1));
    REQUIRE(sf32.skip2.h == 16);
    REQUIRE(sf32.skip4.h == 8);
    REQUIRE(sf32.skip8.h == 4);
    REQUIRE(sf32.skip2.c == cfg.stem_channels);
    REQUIRE(sf32.skip4.c == 2 * cfg.stem_channels);
    REQUIRE(sf32.skip8.c == 4 * cfg.stem_channels);

    // doubling the input doubles every skip side with the same weights
    const auto sf64 = model.conv_stem(random_image(64, 2));
    REQUIRE(sf64.skip2.h == 32);
    REQUIRE(sf64.skip4.h == 16);
    REQUIRE(sf64.skip8.h == 8);

    Image2D odd;
    odd.pixels = Array2D<float>(30, 30, 0.2f);
    odd.spacing_mm = {0.1, 0.1};
    REQUIRE_THROWS_AS(model.conv_stem(odd), std::invalid_argument);
}

TEST_CASE("batch items do not interact", "[model]") {
    MicroSegNet model(micro_config(), 3);
    const auto a = random_image(32, 10);
    auto b = random_image(32, 11);
    const auto pa_before = model.forward(a, true);
    b.pixels(7, 7) = 0.0f;  // perturb the other item
    const auto pa_after = model.forward(a, true);
    REQUIRE(pa_before.p1.probs == pa_after.p1.probs);
}

TEST_CASE("patch embedding produces N = HW/P^2 tokens", "[model]") {
    const ModelConfig cfg = ModelConfig::tiny();
    MicroSegNet model(cfg, 4);
    REQUIRE(cfg.num_tokens() == 196);
    const auto sf = model.conv_stem(random_image(224, 6));
    const auto z0 = model.patch_embed(sf.skip8);
    REQUIRE(z0.rows() == 196);
    REQUIRE(z0.cols() == cfg.embed_dim);

    SECTION("different images give different token sequences") {
        const auto sf2 = model.conv_stem(random_image(224, 7));
        const auto z1 = model.patch_embed(sf2.skip8);
        REQUIRE_FALSE(z1 == z0);
    }
}

TEST_CASE("zeroed positional table reduces patch_embed to the linear projection",
          "[model]") {
    const ModelConfig cfg = micro_config();
    MicroSegNet model(cfg, 5);
    std::size_t pos_size = 0;
    float* pos = model.param_data("embed.pos", &pos_size);
    std::fill(pos, pos + pos_size, 0.0f);

    const auto sf = model.conv_stem(random_image(32, 8));
    const auto z0 = model.patch_embed(sf.skip8);

    // Independent projection of the top-left 2x2 patch: weight layout is
    // (ky*k + kx)*cin + ci, token 0 covers feature pixels (0,0),(0,1),(1,0),(1,1).
    std::size_t wsz = 0;
    const float* w = model.param_data("embed.proj.w", &wsz);
    const float* bias = model.param_data("embed.proj.b");
    const int cin = sf.skip8.c;
    const int d = cfg.embed_dim;
    const int k = cfg.patch_size / 8;
    REQUIRE(k == 2);
    for (int dch = 0; dch < d; ++dch) {
        double acc = bias[dch];
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx)
                for (int ci = 0; ci < cin; ++ci) {
                    const int col_idx = (ky * k + kx) * cin + ci;
                    // column-major (d x cin*k*k) weight matrix
                    const float wv = w[static_cast<std::size_t>(col_idx) * d + dch];
                    acc += wv * sf.skip8.m(ci, ky * sf.skip8.w + kx);
                }
        REQUIRE_THAT(z0(0, dch), Catch::Matchers::WithinAbs(acc, 1e-4));
    }
}

TEST_CASE("encoder with zeroed output projections is the identity", "[model]") {
    const ModelConfig cfg = micro_config();
    MicroSegNet model(cfg, 6);
    for (int l = 0; l < cfg.num_layers; ++l) {
        std::size_t n = 0;
        float* p = model.param_data("enc." + std::to_string(l) + ".attn.proj.w", &n);
        std::fill(p, p + n, 0.0f);
        p = model.param_data("enc." + std::to_string(l) + ".ffn.fc2.w", &n);
        std::fill(p, p + n, 0.0f);
    }
    Rng rng(33);
    nn::Mat z0(cfg.num_tokens(), cfg.embed_dim);
    for (int i = 0; i < z0.size(); ++i) z0.data()[i] = static_cast<float>(rng.normal());
    const nn::Mat z = model.transformer_encoder(z0);
    REQUIRE(z == z0);  // exact: every sublayer contributes exactly zero
}

TEST_CASE("encoder without positions is permutation-equivariant", "[model]") {
    const ModelConfig cfg = micro_config();
    MicroSegNet model(cfg, 7);
    const int n = cfg.num_tokens();
    Rng rng(44);
    nn::Mat z0(n, cfg.embed_dim);
    for (int i = 0; i < z0.size(); ++i) z0.data()[i] = static_cast<float>(rng.normal());

    std::vector<int> perm(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    rng.shuffle(perm);

    nn::Mat z0p(n, cfg.embed_dim);
    for (int i = 0; i < n; ++i) z0p.row(i) = z0.row(perm[static_cast<std::size_t>(i)]);

    const nn::Mat enc_then_perm = [&] {
        const nn::Mat e = model.transformer_encoder(z0);
        nn::Mat out(n, cfg.embed_dim);
        for (int i = 0; i < n; ++i) out.row(i) = e.row(perm[static_cast<std::size_t>(i)]);
        return out;
    }();
    const nn::Mat perm_then_enc = model.transformer_encoder(z0p);
    REQUIRE((enc_then_perm - perm_then_enc).cwiseAbs().maxCoeff() < 1e-5f);
}

TEST_CASE("saturated head bias drives the output to the clamp", "[model]") {
    const ModelConfig cfg = micro_config();
    MicroSegNet model(cfg, 8);
    float* b = model.param_data("head.p1.b");
    b[0] = 50.0f;
    const auto pred = model.forward(random_image(32, 9), false);
    for (std::size_t i = 0; i < pred.p1.probs.size(); ++i)
        REQUIRE(pred.p1.probs.data()[i] == 1.0f - 1e-7f);
}

TEST_CASE("parameter count equals the shape-arithmetic oracle", "[model]") {
    const auto count_for = [](const ModelConfig& cfg) -> std::size_t {
        const std::size_t c = static_cast<std::size_t>(cfg.stem_channels);
        const std::size_t d = static_cast<std::size_t>(cfg.embed_dim);
        const std::size_t n = static_cast<std::size_t>(cfg.num_tokens());
        const std::size_t h = static_cast<std::size_t>(cfg.mlp_ratio * cfg.embed_dim + 0.5);
        const std::size_t cl = static_cast<std::size_t>(std::max(cfg.stem_channels / 2, 4));
        std::size_t total = 0;
        // stem convs, each followed by a group norm (2 affine params/channel)
        total += c * 9 * 1 + c + 2 * c;
        total += (2 * c) * (9 * c) + 2 * c + 2 * (2 * c);
        total += (4 * c) * (9 * 2 * c) + 4 * c + 2 * (4 * c);
        // patch projection + positions
        const std::size_t kp = static_cast<std::size_t>(cfg.patch_size / 8);
        total += d * (kp * kp * 4 * c) + d;
        total += n * d;
        // encoder layers: 2 LN + qkv + proj + 2 fc
        total += static_cast<std::size_t>(cfg.num_layers) *
                 (2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d));
        total += 2 * d;  // final LN
        // decoder convs + group norms
        total += (4 * c) * (9 * d) + 4 * c + 2 * (4 * c);
        total += (4 * c) * (9 * 8 * c) + 4 * c + 2 * (4 * c);
        total += (2 * c) * (9 * 6 * c) + 2 * c + 2 * (2 * c);
        total += c * (9 * 3 * c) + c + 2 * c;
        total += cl * (9 * c) + cl + 2 * cl;
        // heads
        total += (4 * c + 1) + (2 * c + 1) + (c + 1) + (cl + 1);
        return total;
    };

    for (const ModelConfig& cfg : {ModelConfig::tiny(), micro_config()}) {
        MicroSegNet model(cfg, 10);
        REQUIRE(model.parameter_count() == count_for(cfg));
    }
}

TEST_CASE("per-tensor directional derivatives match finite differences", "[model]") {
    const ModelConfig cfg = micro_config();
    MicroSegNet model(cfg, 11);
    const auto img = random_image(32, 12);
    Rng rng(13);
    const auto y1 = random_mask(32, 32, rng, 0.4);
    const auto hard = random_mask(32, 32, rng, 0.2);
    const auto w = weights_from_mask(hard, 12.0, 1.0);

    MultiScaleTarget targets;
    targets.y1 = y1;
    targets.y2 = downsample_mask(y1, 2);
    targets.y3 = downsample_mask(y1, 4);
    targets.y4 = downsample_mask(y1, 8);

    const auto loss_at = [&]() {
        const auto pred = model.forward(img, true);
        return training_loss(pred, targets, w, true).total;
    };

    // analytic gradient
    MicroSegNet::Cache cache;
    const auto pred = model.forward_train(img, true, cache);
    MicroSegNet::HeadGrads hg;
    hg.g1 = detail::head_logit_grad(pred.p1, targets.y1, &w, kScaleLossWeights[0], 1);
    hg.g2 = detail::head_logit_grad(*pred.p2, *targets.y2, nullptr, kScaleLossWeights[1], 1);
    hg.g3 = detail::head_logit_grad(*pred.p3, *targets.y3, nullptr, kScaleLossWeights[2], 1);
    hg.g4 = detail::head_logit_grad(*pred.p4, *targets.y4, nullptr, kScaleLossWeights[3], 1);
    std::vector<float> grad(model.parameter_count(), 0.0f);
    model.backward(cache, hg, grad.data());

    // one random unit direction per named tensor
    Rng drng(14);
    int tensors_checked = 0;
    for (const auto& view : model.registry().views()) {
        std::vector<float> dir(view.size);
        double norm = 0.0;
        for (auto& v : dir) {
            v = static_cast<float>(drng.normal());
            norm += static_cast<double>(v) * v;
        }
        norm = std::sqrt(norm);
        for (auto& v : dir) v = static_cast<float>(v / norm);

        double analytic = 0.0;
        for (std::size_t i = 0; i < view.size; ++i)
            analytic += static_cast<double>(grad[view.offset + i]) * dir[i];

        const float h = 2e-3f;
        float* p = model.parameters() + view.offset;
        std::vector<float> saved(p, p + view.size);
        for (std::size_t i = 0; i < view.size; ++i) p[i] = saved[i] + h * dir[i];
        const double up = loss_at();
        for (std::size_t i = 0; i < view.size; ++i) p[i] = saved[i] - h * dir[i];
        const double dn = loss_at();
        std::copy(saved.begin(), saved.end(), p);

        const double numeric = (up - dn) / (2.0 * static_cast<double>(h));
        const double rel = std::abs(numeric - analytic) /
                           std::max({std::abs(numeric), std::abs(analytic), 1e-6});
        INFO(view.name << ": analytic " << analytic << " numeric " << numeric);
        REQUIRE(rel < 2e-2);
        ++tensors_checked;
    }
    REQUIRE(tensors_checked == static_cast<int>(model.registry().views().size()));
}

TEST_CASE("loss gradient is finite for every parameter group", "[model]") {
    const ModelConfig cfg = micro_config();
    MicroSegNet model(cfg, 15);
    Rng rng(16);
    std::vector<float> grad(model.parameter_count(), 0.0f);
    for (int item = 0; item < 3; ++item) {
        const auto img = random_image(32, 100 + static_cast<std::uint64_t>(item));
        const auto y1 = random_mask(32, 32, rng, 0.4);
        MultiScaleTarget t;
        t.y1 = y1;
        t.y2 = downsample_mask(y1, 2);
        t.y3 = downsample_mask(y1, 4);
        t.y4 = downsample_mask(y1, 8);
        const auto w = weights_from_mask(random_mask(32, 32, rng, 0.2), 12.0, 1.0);
        MicroSegNet::Cache cache;
        const auto pred = model.forward_train(img, true, cache);
        MicroSegNet::HeadGrads hg;
        hg.g1 = detail::head_logit_grad(pred.p1, t.y1, &w, kScaleLossWeights[0], 3);
        hg.g2 = detail::head_logit_grad(*pred.p2, *t.y2, nullptr, kScaleLossWeights[1], 3);
        hg.g3 = detail::head_logit_grad(*pred.p3, *t.y3, nullptr, kScaleLossWeights[2], 3);
        hg.g4 = detail::head_logit_grad(*pred.p4, *t.y4, nullptr, kScaleLossWeights[3], 3);
        model.backward(cache, hg, grad.data());
    }
    for (const auto& view : model.registry().views()) {
        double sum_abs = 0.0;
        for (std::size_t i = 0; i < view.size; ++i) {
            REQUIRE(std::isfinite(grad[view.offset + i]));
            sum_abs += std::abs(grad[view.offset + i]);
        }
        INFO(view.name);
        REQUIRE(sum_abs > 0.0);  // every group participates in the loss
    }
}

TEST_CASE("pure stem mode patchifies the raw image", "[model]") {
    ModelConfig cfg = micro_config();
    cfg.stem_mode = StemMode::kPure;
    MicroSegNet model(cfg, 17);
    const auto pred = model.forward(random_image(32, 18), true);
    REQUIRE(pred.p1.rows() == 32);
    REQUIRE(pred.p4->rows() == 4);

    ModelConfig hybrid = micro_config();
    MicroSegNet hmodel(hybrid, 17);
    // pure mode projects 16x16 raw patches (256 inputs); hybrid projects 2x2
    // patches of the 16-channel deep features (64 inputs)
    REQUIRE(model.parameter_count() != hmodel.parameter_count());
}

TEST_CASE("checkpoint round trip preserves parameters and metadata", "[model]") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "microsegnet_model_test";
    fs::create_directories(dir);
    const auto path = (dir / "model.ckpt").string();

    const ModelConfig cfg = micro_config();
    MicroSegNet model(cfg, 19);
    CheckpointMeta meta;
    meta.epoch = 10;
    meta.seed = 77;
    meta.loss_curve = {0.7, 0.5, 0.3};
    meta.w_hard = 12.0;
    meta.deep_supervision = true;
    model.save_checkpoint(path, meta);

    CheckpointMeta back;
    MicroSegNet loaded = MicroSegNet::load_checkpoint(path, &back);
    REQUIRE(back.epoch == 10);
    REQUIRE(back.seed == 77);
    REQUIRE(back.loss_curve == meta.loss_curve);
    REQUIRE(loaded.config().embed_dim == cfg.embed_dim);
    REQUIRE(loaded.parameter_count() == model.parameter_count());

    const auto img = random_image(32, 20);
    const auto a = model.forward(img, true);
    const auto b = loaded.forward(img, true);
    REQUIRE(a.p1.probs == b.p1.probs);

    SECTION("bad magic and truncation are rejected") {
        {
            std::ofstream bad((dir / "bad.ckpt").string(), std::ios::binary);
            bad << "not-a-checkpoint\n";
        }
        REQUIRE_THROWS_AS(MicroSegNet::load_checkpoint((dir / "bad.ckpt").string()),
                          std::runtime_error);

        const auto full = png::detail::read_file(path);
        std::vector<std::uint8_t> cut(full.begin(), full.begin() + static_cast<long>(full.size() / 2));
        png::detail::write_file((dir / "cut.ckpt").string(), cut);
        REQUIRE_THROWS_AS(MicroSegNet::load_checkpoint((dir / "cut.ckpt").string()),
                          std::runtime_error);
    }
}
