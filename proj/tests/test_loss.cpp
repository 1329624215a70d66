#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "ndvq/loss.hpp"
#include "ndvq/autodiff.hpp"

using namespace ndvq;

namespace {

std::vector<double> random_signal(std::size_t n, Rng& rng, double amp = 0.8) {
    std::vector<double> x(n);
    for (double& v : x) v = rng.uniform(-amp, amp);
    return x;
}

}  // namespace

TEST_CASE("time L1 basics", "[loss]") {
    const std::vector<double> a{1.0, 1.0}, b{0.0, 0.0};
    CHECK(time_l1<double, double>(a, a) == 0.0);
    CHECK(time_l1<double, double>(a, b) == 1.0);
    const std::vector<double> short_one{1.0};
    CHECK_THROWS_AS((time_l1<double, double>(a, short_one)), std::invalid_argument);
}

TEST_CASE("time L1 gradient is -sign/T", "[loss]") {
    Rng rng(3);
    const std::size_t n = 16;
    const std::vector<double> x = random_signal(n, rng);
    std::vector<double> xh = random_signal(n, rng);

    ad::Tape tape;
    std::vector<ad::Var> xv;
    for (const double v : xh) xv.push_back(tape.input(v));
    const ad::Var loss = time_l1(std::span<const double>(x), std::span<const ad::Var>(xv));
    tape.backward(loss);
    for (std::size_t i = 0; i < n; ++i) {
        const double expect = -((x[i] - xh[i]) > 0 ? 1.0 : -1.0) / static_cast<double>(n);
        CHECK_THAT(xv[i].adjoint(), Catch::Matchers::WithinAbs(expect, 1e-15));
    }

    const double pt_err = ad::grad_check(
        [&](ad::Tape&, std::span<const ad::Var> v) {
            return time_l1(std::span<const double>(x), v);
        },
        xh, 1e-5);
    CHECK(pt_err < 1e-3);
}

TEST_CASE("multiscale mel loss is zero on identical inputs and non-negative", "[loss]") {
    Rng rng(5);
    const std::vector<double> x = random_signal(96, rng);
    CHECK(multiscale_mel_loss<double, double>(x, x, 8000) == 0.0);

    for (int trial = 0; trial < 10; ++trial) {
        const std::vector<double> a = random_signal(96, rng);
        const std::vector<double> b = random_signal(96, rng);
        CHECK(multiscale_mel_loss<double, double>(a, b, 8000) >= 0.0);
    }

    const std::vector<double> tiny(16, 0.1);
    CHECK_THROWS_AS((multiscale_mel_loss<double, double>(tiny, tiny, 8000)), ConfigError);
}

TEST_CASE("multiscale mel loss passes finite differences", "[loss]") {
    Rng rng(7);
    double worst = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        const std::vector<double> x = random_signal(64, rng);
        const std::vector<double> xh = random_signal(64, rng);
        worst = std::max(worst, ad::grad_check(
                                    [&](ad::Tape&, std::span<const ad::Var> v) {
                                        return multiscale_mel_loss(std::span<const double>(x), v, 8000);
                                    },
                                    xh, 1e-5));
    }
    CHECK(worst < 1e-3);
}

TEST_CASE("adversarial hinge loss hand values", "[loss]") {
    const std::vector<double> saturated{1.0, 2.5, 7.0};
    CHECK(adversarial_gen_loss<double>(saturated) == 0.0);
    const std::vector<double> zero{0.0};
    CHECK(adversarial_gen_loss<double>(zero) == 1.0);
    const std::vector<double> pair{-1.0, 3.0};
    CHECK_THAT(adversarial_gen_loss<double>(pair), Catch::Matchers::WithinAbs(1.0, 1e-12));
    const std::vector<double> empty;
    CHECK_THROWS_AS(adversarial_gen_loss<double>(empty), std::invalid_argument);
}

TEST_CASE("discriminator hinge loss hand values", "[loss]") {
    const std::vector<double> real_good{1.0, 2.0}, fake_good{-1.0, -3.0};
    CHECK((discriminator_hinge_loss<double, double>(real_good, fake_good)) == 0.0);
    const std::vector<double> zeros1{0.0};
    CHECK((discriminator_hinge_loss<double, double>(zeros1, zeros1)) == 2.0);
    const std::vector<double> r{2.0}, f{0.5};
    CHECK_THAT((discriminator_hinge_loss<double, double>(r, f)), Catch::Matchers::WithinAbs(1.5, 1e-12));
    const std::vector<double> two{0.0, 0.0};
    CHECK_THROWS_AS((discriminator_hinge_loss<double, double>(zeros1, two)), std::invalid_argument);
}

namespace {

DiscriminatorOutput<double> single_feature(double value) {
    DiscriminatorOutput<double> out;
    out.logits = {0.0};
    Mat<double> f(1, 1);
    f.at(0, 0) = value;
    out.features.push_back({f});
    return out;
}

}  // namespace

TEST_CASE("feature matching loss hand values and invariances", "[loss]") {
    const auto real = single_feature(2.0);
    const auto fake = single_feature(1.0);
    CHECK_THAT(feature_matching_loss(real, fake), Catch::Matchers::WithinAbs(0.5, 1e-12));
    CHECK(feature_matching_loss(real, real) == 0.0);

    // joint positive scaling leaves it unchanged
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        DiscriminatorOutput<double> a, b;
        a.logits = b.logits = {0.0};
        Mat<double> fa(3, 4), fb(3, 4);
        for (auto& v : fa.data) v = rng.uniform(-1.0, 1.0);
        for (auto& v : fb.data) v = rng.uniform(-1.0, 1.0);
        a.features.push_back({fa});
        b.features.push_back({fb});
        const double base = feature_matching_loss(a, b);

        const double c = rng.uniform(0.1, 10.0);
        DiscriminatorOutput<double> as = a, bs = b;
        for (auto& v : as.features[0][0].data) v *= c;
        for (auto& v : bs.features[0][0].data) v *= c;
        CHECK_THAT(feature_matching_loss(as, bs), Catch::Matchers::WithinRel(base, 1e-9));
    }

    DiscriminatorOutput<double> mismatched = single_feature(1.0);
    mismatched.features[0][0] = Mat<double>(2, 2);
    CHECK_THROWS_AS(feature_matching_loss(real, mismatched), std::invalid_argument);
}

TEST_CASE("weighted totals", "[loss]") {
    const LossWeights w;
    CHECK(w.lambda_t == 0.5);
    CHECK(w.lambda_f == 0.5);
    CHECK(w.lambda_c == 0.5);
    CHECK(w.lambda_fm == 5.0);
    CHECK(w.lambda_a == 1.0);
    CHECK(w.lambda_d == 1.0);
    CHECK(w.beta == 0.25);
    CHECK(w.gamma == 1e-5);

    CHECK(generator_total(0.0, 0.0, 0.0, 0.0, 0.0, w) == 0.0);
    CHECK_THAT(generator_total(1.0, 1.0, 1.0, 1.0, 1.0, w), Catch::Matchers::WithinAbs(7.5, 1e-12));

    LossWeights doubled = w;
    doubled.lambda_fm *= 2.0;
    const double base = generator_total(0.3, 0.4, 0.5, 0.6, 0.7, w);
    const double more = generator_total(0.3, 0.4, 0.5, 0.6, 0.7, doubled);
    CHECK_THAT(more - base, Catch::Matchers::WithinAbs(0.6 * 5.0, 1e-12));

    CHECK(discriminator_total(0.0, w) == 0.0);
    CHECK(discriminator_total(2.0, w) == 2.0);
    LossWeights silent = w;
    silent.lambda_d = 0.0;
    CHECK(discriminator_total(123.0, silent) == 0.0);
}

TEST_CASE("stub discriminator shapes and determinism", "[loss]") {
    Rng rng(13);
    const std::vector<double> x = random_signal(2048, rng);
    const auto out = stub_discriminator(std::span<const double>(x), 99);
    CHECK(out.logits.size() == 5);  // all five scales fit
    REQUIRE(out.features.size() == 5);
    for (const auto& layers : out.features) CHECK(layers.size() == 2);
    for (const double l : out.logits) CHECK(std::isfinite(l));

    const auto again = stub_discriminator(std::span<const double>(x), 99);
    CHECK(out.logits == again.logits);

    const auto other_seed = stub_discriminator(std::span<const double>(x), 100);
    CHECK(out.logits != other_seed.logits);

    const std::vector<double> shorter = random_signal(512, rng);
    CHECK(stub_discriminator(std::span<const double>(shorter), 99).logits.size() == 3);

    const std::vector<double> too_short = random_signal(64, rng);
    CHECK_THROWS_AS(stub_discriminator(std::span<const double>(too_short), 99), ConfigError);
}

TEST_CASE("adversarial losses are differentiable through the stub", "[loss]") {
    Rng rng(17);
    const std::vector<double> x = random_signal(160, rng);
    const std::vector<double> xh = random_signal(160, rng);

    const auto gen_fn = [&](ad::Tape&, std::span<const ad::Var> v) {
        const auto fake = stub_discriminator(v, 7);
        return adversarial_gen_loss(std::span<const ad::Var>(fake.logits));
    };
    CHECK(ad::grad_check(gen_fn, xh, 1e-5) < 1e-3);

    const auto fm_fn = [&](ad::Tape&, std::span<const ad::Var> v) {
        const auto real = stub_discriminator(std::span<const double>(x), 7);
        const auto fake = stub_discriminator(v, 7);
        return feature_matching_loss(real, fake);
    };
    CHECK(ad::grad_check(fm_fn, xh, 1e-5) < 1e-3);
}
