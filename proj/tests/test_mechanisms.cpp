#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "htcn/mechanisms.hpp"
#include "htcn/rng.hpp"
#include "htcn/selfcheck.hpp"

using namespace htcn;

TEST_CASE("binary entropy: anchor values") {
    CHECK(binary_entropy_value(0.5) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(binary_entropy_value(0.25) == doctest::Approx(0.8112781245).epsilon(1e-9));
    CHECK(binary_entropy_value(1e-9) == doctest::Approx(0.0).epsilon(1e-5));
    CHECK(binary_entropy_value(1.0 - 1e-9) == doctest::Approx(0.0).epsilon(1e-5));
}

TEST_CASE("entropy, weights, and masks respect their bounds over 10k scores") {
    Pcg32 rng(derive_seed(99, "bounds", 0));
    for (int i = 0; i < 10000; ++i) {
        // Includes values outside (0,1) to exercise the clamp.
        double d = rng.uniform(-0.1, 1.1);
        double v = binary_entropy_value(d);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        double weight = 1.0 + v;
        CHECK(weight >= 1.0);
        CHECK(weight <= 2.0);
        double m = 2.0 - v;
        CHECK(m >= 1.0);
        CHECK(m <= 2.0);
        // Symmetry H(d) = H(1-d).
        CHECK(v == doctest::Approx(binary_entropy_value(1.0 - d)).epsilon(1e-9));
        // Unique maximum at 0.5.
        if (std::fabs(d - 0.5) > 1e-3 && d > 0.0 && d < 1.0) {
            CHECK(v < 1.0);
        }
    }
}

TEST_CASE("image reweight scales elementwise by 1+v") {
    Tensor f = Tensor::from_values({2}, {1.0, -2.0}, false);
    Tensor g = image_reweight(f, 0.5);
    CHECK(g.values()[0] == doctest::Approx(1.5).epsilon(1e-15));
    CHECK(g.values()[1] == doctest::Approx(-3.0).epsilon(1e-15));
    Tensor same = image_reweight(f, 0.0);
    CHECK(same.values() == f.values());
    Tensor twice = image_reweight(f, 1.0);
    CHECK(twice.values()[0] == 2.0);
    CHECK_THROWS_AS((void)image_reweight(f, 1.5), std::runtime_error);
    CHECK_THROWS_AS((void)image_reweight(f, -0.2), std::runtime_error);
}

TEST_CASE("local feature mask values") {
    Tensor flat = Tensor::full({2, 2}, 0.5, false);
    Tensor m1 = local_feature_mask(flat);
    for (double v : m1.values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));

    Tensor confident = Tensor::full({1, 1}, 0.999, false);
    CHECK(local_feature_mask(confident).values()[0] ==
          doctest::Approx(1.9886).epsilon(1e-4));

    // Uniform scores give a spatially constant mask.
    Tensor uniform = Tensor::full({3, 5}, 0.73, false);
    auto mv = local_feature_mask(uniform).values();
    for (double v : mv) CHECK(v == mv[0]);

    CHECK(!local_feature_mask(flat).requires_grad());
}

TEST_CASE("fusion: scalar case and linearity") {
    RandomProjectionPair proj;
    proj.d_out = 1;
    proj.r_context = Tensor::from_values({1, 1}, {1.0}, false);
    proj.r_instance = Tensor::from_values({1, 1}, {1.0}, false);
    Tensor fc = Tensor::from_values({1}, {2.0}, false);
    Tensor fins = Tensor::from_values({1, 1}, {3.0}, false);
    Tensor fused = multilinear_fusion(fc, fins, proj);
    CHECK(fused.shape() == std::vector<int>{1, 1});
    CHECK(fused.values()[0] == doctest::Approx(6.0).epsilon(1e-15));

    // Zero context annihilates the fusion.
    Tensor zero_ctx = Tensor::zeros({1}, false);
    CHECK(multilinear_fusion(zero_ctx, fins, proj).values()[0] == 0.0);
}

TEST_CASE("fusion is bilinear with projections fixed") {
    Pcg32 rng(derive_seed(5, "bilinear", 0));
    RandomProjectionPair proj = RandomProjectionPair::create(6, 9, 13, rng);
    auto rand_vec = [&rng](std::vector<int> shape) {
        Tensor t = Tensor::zeros(std::move(shape), false);
        for (auto& v : t.mutable_values()) v = rng.uniform(-1.0, 1.0);
        return t;
    };
    Tensor x = rand_vec({6});
    Tensor x2 = rand_vec({6});
    Tensor u = rand_vec({2, 9});

    Tensor lhs = multilinear_fusion(scalar_mul(x, 2.5), u, proj);
    Tensor rhs = scalar_mul(multilinear_fusion(x, u, proj), 2.5);
    for (std::size_t i = 0; i < lhs.numel(); ++i) {
        CHECK(lhs.values()[i] == doctest::Approx(rhs.values()[i]).epsilon(1e-12));
    }

    Tensor sum_lhs = multilinear_fusion(add(x, x2), u, proj);
    Tensor sum_rhs = add(multilinear_fusion(x, u, proj), multilinear_fusion(x2, u, proj));
    for (std::size_t i = 0; i < sum_lhs.numel(); ++i) {
        CHECK(sum_lhs.values()[i] == doctest::Approx(sum_rhs.values()[i]).epsilon(1e-12));
    }
}

TEST_CASE("fusion projections are unit variance uniform") {
    Pcg32 rng(derive_seed(17, "proj", 0));
    RandomProjectionPair proj = RandomProjectionPair::create(64, 64, 64, rng);
    double bound = std::sqrt(3.0);
    double acc = 0.0, acc2 = 0.0;
    std::size_t n = 0;
    for (const Tensor* t : {&proj.r_context, &proj.r_instance}) {
        for (double v : t->values()) {
            CHECK(std::fabs(v) <= bound);
            acc += v;
            acc2 += v * v;
            ++n;
        }
    }
    double mean = acc / static_cast<double>(n);
    double var = acc2 / static_cast<double>(n) - mean * mean;
    CHECK(mean == doctest::Approx(0.0).epsilon(0.05));
    CHECK(var == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("image adversarial loss: frozen values") {
    // Combined-batch mean: -(log 0.9 + log 0.8) / 2.
    Tensor ds = Tensor::from_values({1}, {0.9}, false);
    Tensor dt = Tensor::from_values({1}, {0.2}, false);
    CHECK(bce_image_adversarial_loss(ds, dt).scalar_value() ==
          doctest::Approx(0.16425).epsilon(1e-4));

    // Maximal confusion: log 2 per sample.
    Tensor half_s = Tensor::full({3}, 0.5, false);
    Tensor half_t = Tensor::full({3}, 0.5, false);
    CHECK(bce_image_adversarial_loss(half_s, half_t).scalar_value() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // Confident and correct drives the loss toward zero.
    Tensor sure_s = Tensor::full({2}, 1.0 - 1e-9, false);
    Tensor sure_t = Tensor::full({2}, 1e-9, false);
    CHECK(bce_image_adversarial_loss(sure_s, sure_t).scalar_value() <= 1e-6);
}

TEST_CASE("instance alignment loss: frozen values") {
    Tensor ds = Tensor::from_values({1}, {0.8}, false);
    Tensor dt = Tensor::from_values({1}, {0.4}, false);
    CHECK(instance_align_loss(ds, dt).scalar_value() ==
          doctest::Approx(0.7340).epsilon(1e-3));

    Tensor half_s = Tensor::full({4}, 0.5, false);
    Tensor half_t = Tensor::full({2}, 0.5, false);
    CHECK(instance_align_loss(half_s, half_t).scalar_value() ==
          doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("pixelwise adversarial loss: frozen values") {
    Tensor ds = Tensor::from_values({2}, {0.8, 0.6}, false);
    Tensor dt = Tensor::from_values({2}, {0.3, 0.1}, false);
    CHECK(pixelwise_adversarial_loss(ds, dt).scalar_value() ==
          doctest::Approx(0.15).epsilon(1e-12));

    Tensor half = Tensor::full({5, 5}, 0.5, false);
    CHECK(pixelwise_adversarial_loss(half, half).scalar_value() ==
          doctest::Approx(0.5).epsilon(1e-12));

    Tensor ones = Tensor::full({3, 3}, 1.0 - 1e-12, false);
    Tensor zeros = Tensor::full({3, 3}, 1e-12, false);
    CHECK(pixelwise_adversarial_loss(ones, zeros).scalar_value() ==
          doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("losses are non-negative on random scores") {
    Pcg32 rng(derive_seed(123, "nonneg", 0));
    for (int trial = 0; trial < 200; ++trial) {
        auto scores = [&rng](int n) {
            Tensor t = Tensor::zeros({n}, false);
            for (auto& v : t.mutable_values()) v = rng.uniform(1e-6, 1.0 - 1e-6);
            return t;
        };
        Tensor s = scores(3), t = scores(2);
        CHECK(bce_image_adversarial_loss(s, t).scalar_value() >= 0.0);
        CHECK(instance_align_loss(s, t).scalar_value() >= 0.0);
        CHECK(pixelwise_adversarial_loss(s, t).scalar_value() >= 0.0);
    }
}

TEST_CASE("fusion unbiasedness: small Monte-Carlo smoke run") {
    // The acceptance suite runs the full-size version; this guards the
    // estimator plumbing at unit-test cost.
    auto r = run_fusion_unbiasedness_check(20260816, 4, 3000, 12, 16, 32);
    CHECK(r.pairs == 4);
    CHECK(r.pairs_within_3se == 4);
    CHECK(r.pass);
}

TEST_CASE("fusion check is deterministic in its seed") {
    auto a = run_fusion_unbiasedness_check(55, 2, 500, 8, 8, 16);
    auto b = run_fusion_unbiasedness_check(55, 2, 500, 8, 8, 16);
    CHECK(a.worst_abs_z == b.worst_abs_z);
    CHECK(a.pairs_within_3se == b.pairs_within_3se);
}
