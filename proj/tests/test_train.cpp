#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <vector>

#include "ndvq/train.hpp"
#include "oracles.hpp"

using namespace ndvq;

namespace {

TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.seed = 5;
    cfg.steps = 4;
    cfg.batch_size = 1;
    cfg.clip_length = 128;
    cfg.learning_rate = 3e-4;
    cfg.codec.sample_rate = 8000;
    cfg.codec.strides = {2, 2};
    cfg.codec.channels = {4};
    cfg.codec.latent_dim = 6;
    cfg.codec.codebook_size = 8;
    cfg.codec.max_layers = 2;
    cfg.dataset.n_clips = 12;
    cfg.dataset.noise_level = 0.01;
    return cfg;
}

std::vector<AudioBuffer> tiny_dataset(const TrainConfig& cfg) {
    SyntheticDatasetConfig ds = cfg.dataset;
    ds.sample_rate = cfg.codec.sample_rate;
    return generate_dataset(ds, cfg.clip_length, cfg.seed);
}

std::string temp_dir(const char* name) {
    const auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    return p.string();
}

}  // namespace

TEST_CASE("synthetic dataset is seed-deterministic and normalized", "[train]") {
    SyntheticDatasetConfig ds;
    ds.n_clips = 6;
    ds.sample_rate = 8000;
    ds.noise_level = 0.01;
    const auto a = generate_dataset(ds, 256, 9);
    const auto b = generate_dataset(ds, 256, 9);
    const auto c = generate_dataset(ds, 256, 10);
    REQUIRE(a.size() == 6);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].samples == b[i].samples);
        for (const float s : a[i].samples) {
            CHECK(std::isfinite(s));
            CHECK(std::fabs(s) <= 0.95f);
        }
    }
    bool any_diff = false;
    for (std::size_t i = 0; i < a.size(); ++i) any_diff |= a[i].samples != c[i].samples;
    CHECK(any_diff);
}

TEST_CASE("a noiseless clip is a finite sum of sinusoids", "[train]") {
    SyntheticDatasetConfig ds;
    ds.n_clips = 3;
    ds.sample_rate = 8000;
    ds.noise_level = 0.0;
    const auto clips = generate_dataset(ds, 512, 21);
    for (const auto& clip : clips)
        for (const float s : clip.samples) CHECK(std::isfinite(s));
}

TEST_CASE("a 3-component clip shows 3 dominant spectral peaks", "[train]") {
    SyntheticDatasetConfig ds;
    ds.n_clips = 1;
    ds.components_min = 3;
    ds.components_max = 3;
    ds.noise_level = 0.0;
    ds.sample_rate = 8000;
    const auto clips = generate_dataset(ds, 2048, 3);

    std::vector<double> x(clips[0].samples.begin(), clips[0].samples.end());
    const auto spec = oracles::naive_rdft(x);
    std::vector<double> mag(spec.size());
    for (std::size_t i = 0; i < spec.size(); ++i) mag[i] = std::abs(spec[i]);
    const double peak = *std::max_element(mag.begin(), mag.end());

    int dominant = 0;
    for (std::size_t b = 1; b + 1 < mag.size(); ++b)
        if (mag[b] > 0.2 * peak && mag[b] >= mag[b - 1] && mag[b] >= mag[b + 1]) ++dominant;
    CHECK(dominant == 3);
}

TEST_CASE("split keeps the last tenth held out", "[train]") {
    std::vector<AudioBuffer> clips(20);
    for (std::size_t i = 0; i < clips.size(); ++i) {
        clips[i].sample_rate = 8000;
        clips[i].samples.assign(8, static_cast<float>(i) / 100.0f);
    }
    const DatasetSplit split = split_dataset(clips);
    CHECK(split.train.size() == 18);
    CHECK(split.holdout.size() == 2);
    CHECK(split.holdout[0].samples[0] == clips[18].samples[0]);
    CHECK(split.holdout[1].samples[0] == clips[19].samples[0]);
}

TEST_CASE("zero learning rate leaves parameters unchanged with finite losses", "[train]") {
    TrainConfig cfg = tiny_config();
    cfg.learning_rate = 0.0;
    Trainer<NormalCodebook> trainer(cfg, tiny_dataset(cfg));
    const std::vector<double> params_before = trainer.model().params;
    const auto means_before = trainer.quantizer().layers[0].means;
    const StepRecord rec = trainer.run_step(0);
    CHECK(std::isfinite(rec.total));
    CHECK(trainer.model().params == params_before);
    CHECK(trainer.quantizer().layers[0].means == means_before);
}

TEST_CASE("repeated steps on one clip overfit it", "[train]") {
    TrainConfig cfg = tiny_config();
    cfg.steps = 50;
    cfg.learning_rate = 1e-3;
    Trainer<NormalCodebook> trainer(cfg, tiny_dataset(cfg));
    const std::vector<std::size_t> batch{0};
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 50; ++i) {
        const StepRecord rec = trainer.train_step(i, batch);
        if (i == 0) first = rec.total;
        last = rec.total;
    }
    CHECK(last < first);
}

TEST_CASE("reported total equals the weighted component sum", "[train]") {
    TrainConfig cfg = tiny_config();
    Trainer<NormalCodebook> trainer(cfg, tiny_dataset(cfg));
    for (int i = 0; i < 3; ++i) {
        const StepRecord r = trainer.run_step(i);
        const double recomputed = cfg.weights.lambda_t * r.time_l1 + cfg.weights.lambda_f * r.mel +
                                  cfg.weights.lambda_a * r.adversarial +
                                  cfg.weights.lambda_fm * r.feature_matching +
                                  cfg.weights.lambda_c * r.codebook;
        CHECK_THAT(r.total, Catch::Matchers::WithinAbs(recomputed, 1e-9));
    }
}

TEST_CASE("non-finite losses abort with the offending term named", "[train]") {
    TrainConfig cfg = tiny_config();
    Trainer<NormalCodebook> trainer(cfg, tiny_dataset(cfg));
    // a poisoned backbone makes the commitment term explode
    auto& model = const_cast<ToyCodecModel&>(trainer.model());
    for (double& p : model.params) p = 1e200;
    CHECK_THROWS_AS(trainer.run_step(0), DomainError);
}

TEST_CASE("sigma stays clamped and never increases under the literal gradient path", "[train]") {
    TrainConfig cfg = tiny_config();
    cfg.steps = 6;
    cfg.learning_rate = 5e-3;
    Trainer<NormalCodebook> trainer(cfg, tiny_dataset(cfg));
    std::vector<std::vector<double>> prev;
    for (const auto& layer : trainer.quantizer().layers) prev.push_back(layer.log_sigmas);
    for (int i = 0; i < 6; ++i) {
        trainer.run_step(i);
        for (std::size_t l = 0; l < trainer.quantizer().layers.size(); ++l) {
            const auto& now = trainer.quantizer().layers[l].log_sigmas;
            for (std::size_t j = 0; j < now.size(); ++j) {
                CHECK(now[j] <= prev[l][j] + 1e-15);  // shrinkage only
                const double sigma = std::exp(now[j]);
                CHECK(sigma >= kSigmaMin * (1 - 1e-12));
                CHECK(sigma <= kSigmaMax * (1 + 1e-12));
            }
            prev[l] = now;
        }
    }
}

TEST_CASE("training is bitwise reproducible", "[train]") {
    const TrainConfig cfg = tiny_config();
    const auto clips = tiny_dataset(cfg);
    Trainer<NormalCodebook> a(cfg, clips), b(cfg, clips);
    for (int i = 0; i < 4; ++i) {
        const StepRecord ra = a.run_step(i);
        const StepRecord rb = b.run_step(i);
        CHECK(ra.total == rb.total);
        CHECK(ra.time_l1 == rb.time_l1);
    }
    CHECK(a.model().params == b.model().params);
    for (std::size_t l = 0; l < a.quantizer().layers.size(); ++l) {
        CHECK(a.quantizer().layers[l].means == b.quantizer().layers[l].means);
        CHECK(a.quantizer().layers[l].log_sigmas == b.quantizer().layers[l].log_sigmas);
    }
}

TEST_CASE("gan stub engages after warmup", "[train]") {
    TrainConfig cfg = tiny_config();
    cfg.gan_enabled = true;
    cfg.steps = 4;
    cfg.discriminator_warmup_steps = 2;
    Trainer<NormalCodebook> trainer(cfg, tiny_dataset(cfg));
    const StepRecord early = trainer.run_step(0);
    CHECK(early.adversarial == 0.0);
    CHECK(early.feature_matching == 0.0);
    CHECK(early.discriminator == 0.0);
    trainer.run_step(1);
    const StepRecord late = trainer.run_step(2);
    CHECK(late.adversarial != 0.0);
    CHECK(late.feature_matching != 0.0);
    CHECK(late.discriminator != 0.0);
    const double recomputed = cfg.weights.lambda_t * late.time_l1 + cfg.weights.lambda_f * late.mel +
                              cfg.weights.lambda_a * late.adversarial +
                              cfg.weights.lambda_fm * late.feature_matching +
                              cfg.weights.lambda_c * late.codebook;
    CHECK_THAT(late.total, Catch::Matchers::WithinAbs(recomputed, 1e-9));
}

TEST_CASE("sampled-gradient flag routes reconstruction gradients into the codebook", "[train]") {
    TrainConfig cfg = tiny_config();
    cfg.sigma_reconstruction_gradients = true;
    cfg.weights.lambda_c = 0.0;  // kill the only other path into the codebook
    Trainer<NormalCodebook> trainer(cfg, tiny_dataset(cfg));
    const auto means_before = trainer.quantizer().layers[0].means;
    const auto sigmas_before = trainer.quantizer().layers[0].log_sigmas;
    trainer.run_step(0);
    CHECK(trainer.quantizer().layers[0].means != means_before);
    CHECK(trainer.quantizer().layers[0].log_sigmas != sigmas_before);

    // under the literal path the same setup leaves the codebook untouched
    TrainConfig literal = tiny_config();
    literal.weights.lambda_c = 0.0;
    Trainer<NormalCodebook> frozen(literal, tiny_dataset(literal));
    const auto frozen_means = frozen.quantizer().layers[0].means;
    frozen.run_step(0);
    CHECK(frozen.quantizer().layers[0].means == frozen_means);
}

TEST_CASE("euclidean baseline trains through the same loop", "[train]") {
    TrainConfig cfg = tiny_config();
    cfg.quantizer = QuantizerKind::Euclidean;
    Trainer<EuclideanCodebook> trainer(cfg, tiny_dataset(cfg));
    const auto before = trainer.quantizer().layers[0].embeddings;
    const StepRecord rec = trainer.run_step(0);
    CHECK(std::isfinite(rec.total));
    CHECK(trainer.quantizer().layers[0].embeddings != before);
}

TEST_CASE("dead-code expiry replaces unused baseline codes when enabled", "[train]") {
    TrainConfig cfg = tiny_config();
    cfg.quantizer = QuantizerKind::Euclidean;
    cfg.baseline_dead_code_expiry = true;
    cfg.dead_code_threshold = 0.5;
    Trainer<EuclideanCodebook> trainer(cfg, tiny_dataset(cfg));
    // push one code far away so it is never selected, then let the ema decay it out
    auto& rq = const_cast<EuclideanRq&>(trainer.quantizer());
    auto row = rq.layers[0].mean_row(3);
    for (double& v : row) v = 1e6;
    for (int i = 0; i < 60; ++i) trainer.run_step(i);
    CHECK(std::fabs(rq.layers[0].mean_row(3)[0]) < 1e3);  // re-seeded from batch latents
}

TEST_CASE("steps=0 still writes a loadable checkpoint", "[train]") {
    TrainConfig cfg = tiny_config();
    cfg.steps = 0;
    const std::string dir = temp_dir("ndvq_train_zero");
    const TrainRun run = train(cfg, tiny_dataset(cfg), dir);
    CHECK(run.history.empty());
    CHECK(std::filesystem::exists(dir + "/checkpoint_final/model.ndvw"));
    CHECK(std::filesystem::exists(dir + "/checkpoint_final/codebooks.ndvq"));
    CHECK(std::filesystem::exists(dir + "/checkpoint_final/config.json"));
    CHECK(std::filesystem::exists(dir + "/loss_history.csv"));
    const Checkpoint ckpt = load_checkpoint(dir + "/checkpoint_final");
    CHECK(ckpt.config.codec.latent_dim == cfg.codec.latent_dim);
    CHECK(run.initial_eval.si_sdr_db == run.final_eval.si_sdr_db);
    std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoints round-trip the trained state at f32 precision", "[train]") {
    TrainConfig cfg = tiny_config();
    const std::string dir = temp_dir("ndvq_train_ckpt");
    const TrainRun run = train(cfg, tiny_dataset(cfg), dir);
    const Checkpoint ckpt = load_checkpoint(dir + "/checkpoint_final");

    REQUIRE(ckpt.model.params.size() == run.model.params.size());
    for (std::size_t i = 0; i < ckpt.model.params.size(); ++i)
        CHECK(ckpt.model.params[i] == static_cast<double>(static_cast<float>(run.model.params[i])));

    REQUIRE(std::holds_alternative<NormalRq>(ckpt.quantizer));
    const auto reserialized = serialize_codebooks(std::get<NormalRq>(ckpt.quantizer));
    CHECK(reserialized == serialize_codebooks(std::get<NormalRq>(run.quantizer)));
    std::filesystem::remove_all(dir);
}

TEST_CASE("model weight file rejects mismatched layouts", "[train]") {
    TrainConfig cfg = tiny_config();
    ToyCodecModel model = ToyCodecModel::init_random(cfg.codec, 1);
    auto bytes = serialize_model(model);

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_WITH(load_model_params(model, bad_magic), Catch::Matchers::ContainsSubstring("magic"));

    CodecConfig other = cfg.codec;
    other.latent_dim = 4;
    ToyCodecModel wrong = ToyCodecModel::build(other);
    CHECK_THROWS_AS(load_model_params(wrong, bytes), FormatError);
}

TEST_CASE("same-seed runs produce identical histories and reports", "[train]") {
    TrainConfig cfg = tiny_config();
    cfg.steps = 3;
    const TrainRun a = run_training(cfg);
    const TrainRun b = run_training(cfg);
    CHECK(loss_history_csv(a.history) == loss_history_csv(b.history));
    CHECK(a.final_eval.to_text() == b.final_eval.to_text());
    // two runs of the same quantizer kind: the paired delta is exactly zero
    CHECK(a.final_eval.si_sdr_db - b.final_eval.si_sdr_db == 0.0);
}

TEST_CASE("compare_quantizers aligns both runs and reports deltas per layer", "[train]") {
    TrainConfig cfg = tiny_config();
    cfg.steps = 3;
    const CompareResult cmp = compare_quantizers(cfg);
    CHECK(std::holds_alternative<NormalRq>(cmp.ndvq_run.quantizer));
    CHECK(std::holds_alternative<EuclideanRq>(cmp.baseline_run.quantizer));
    CHECK(cmp.ndvq_run.final_eval.layer_entropy_bits.size() == cfg.codec.max_layers);
    CHECK(cmp.baseline_run.final_eval.layer_entropy_bits.size() == cfg.codec.max_layers);
    CHECK(cmp.delta_entropy_bits.size() == cfg.codec.max_layers);
    CHECK_THAT(cmp.delta_si_sdr_db,
               Catch::Matchers::WithinAbs(cmp.ndvq_run.final_eval.si_sdr_db -
                                          cmp.baseline_run.final_eval.si_sdr_db, 1e-12));
    // identical seeds: both runs trained on identical data
    REQUIRE(cmp.ndvq_run.holdout.size() == cmp.baseline_run.holdout.size());
    for (std::size_t i = 0; i < cmp.ndvq_run.holdout.size(); ++i)
        CHECK(cmp.ndvq_run.holdout[i].samples == cmp.baseline_run.holdout[i].samples);
}
