// Math-core tests: hand-checkable values, invariants, and central
// finite-difference gradient checks against the double-precision reference.

#include <doctest.h>

#include <cstring>

#include "prodapt/tensor.hpp"
#include "ref64.hpp"

using namespace prodapt;

namespace {

Tensor tensor_from(const ref64::Vec& v, std::vector<int64_t> shape, bool rg = false) {
    return Tensor::from_data(std::move(shape), ref64::to_f32(v), rg);
}

}  // namespace

TEST_CASE("matmul identity leaves the other operand unchanged") {
    Tensor eye = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i) eye.mut_data()[i * 3 + i] = 1.0f;
    Tensor b = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
    Tensor out = matmul(eye, b);
    for (int i = 0; i < 6; ++i) CHECK(out.data()[i] == b.data()[i]);
}

TEST_CASE("matmul hand-checkable 2x2 by 2x1") {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_data({2, 1}, {5, 6});
    Tensor out = matmul(a, b);
    CHECK(out.data()[0] == doctest::Approx(17.0f));
    CHECK(out.data()[1] == doctest::Approx(39.0f));
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    try {
        (void)matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradients match finite differences at 10 random points") {
    Rng rng(101);
    for (int trial = 0; trial < 10; ++trial) {
        const size_t m = 3, k = 4, n = 2;
        const ref64::Vec av = ref64::random_vec(m * k, rng);
        const ref64::Vec bv = ref64::random_vec(k * n, rng);

        Tensor a = tensor_from(av, {3, 4}, true);
        Tensor b = tensor_from(bv, {4, 2}, true);
        Tape tape;
        Tensor loss = sum(matmul(a, b, &tape), &tape);
        backward(loss, tape);

        auto f_of_a = [&](const ref64::Vec& x) {
            const ref64::Vec c = ref64::matmul(x, bv, m, k, n);
            double s = 0.0;
            for (double v : c) s += v;
            return s;
        };
        auto f_of_b = [&](const ref64::Vec& x) {
            const ref64::Vec c = ref64::matmul(av, x, m, k, n);
            double s = 0.0;
            for (double v : c) s += v;
            return s;
        };
        CHECK(ref64::grad_close(a.grad(), ref64::fd_gradient(f_of_a, av), m * k));
        CHECK(ref64::grad_close(b.grad(), ref64::fd_gradient(f_of_b, bv), k * n));
    }
}

TEST_CASE("softmax of a constant row is uniform") {
    Tensor x = Tensor::zeros({1, 4});
    Tensor y = softmax(x);
    for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(0.25f));
}

TEST_CASE("softmax is stable for large inputs") {
    Tensor x = Tensor::from_data({1, 2}, {1000.0f, 0.0f});
    Tensor y = softmax(x);
    CHECK(y.data()[0] == doctest::Approx(1.0f));
    CHECK(y.data()[1] == doctest::Approx(0.0f));
    CHECK(std::isfinite(y.data()[0]));
}

TEST_CASE("softmax shift invariance within 1e-6") {
    Rng rng(7);
    const ref64::Vec xv = ref64::random_vec(8, rng);
    Tensor x = tensor_from(xv, {2, 4});
    Tensor shifted = tensor_from(xv, {2, 4});
    for (int i = 0; i < 8; ++i) shifted.mut_data()[i] += 3.25f;
    Tensor y0 = softmax(x);
    Tensor y1 = softmax(shifted);
    for (int i = 0; i < 8; ++i)
        CHECK(std::fabs(y0.data()[i] - y1.data()[i]) < 1e-6f);
}

TEST_CASE("softmax rows sum to 1 within 1e-6 on random inputs") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const ref64::Vec xv = ref64::random_vec(5 * 7, rng, -8.0, 8.0);
        Tensor y = softmax(tensor_from(xv, {5, 7}));
        for (int i = 0; i < 5; ++i) {
            float s = 0.0f;
            for (int j = 0; j < 7; ++j) s += y.data()[i * 7 + j];
            CHECK(std::fabs(s - 1.0f) < 1e-6f);
        }
    }
}

TEST_CASE("softmax gradient matches finite differences") {
    Rng rng(13);
    for (int trial = 0; trial < 10; ++trial) {
        const size_t rows = 2, cols = 5;
        const ref64::Vec xv = ref64::random_vec(rows * cols, rng);
        const ref64::Vec wv = ref64::random_vec(rows * cols, rng, -1.0, 1.0);
        Tensor x = tensor_from(xv, {2, 5}, true);
        Tensor w = tensor_from(wv, {2, 5});
        Tape tape;
        Tensor loss = sum(mul(softmax(x, -1, &tape), w, &tape), &tape);
        backward(loss, tape);
        auto f = [&](const ref64::Vec& v) {
            return ref64::weighted_sum(ref64::softmax_rows(v, rows, cols), wv);
        };
        CHECK(ref64::grad_close(x.grad(), ref64::fd_gradient(f, xv), rows * cols));
    }
}

TEST_CASE("layernorm of a constant row with unit gain is zero") {
    Tensor x = Tensor::full({2, 6}, 3.5f);
    Tensor gain = Tensor::full({6}, 1.0f);
    Tensor bias = Tensor::zeros({6});
    Tensor y = layernorm(x, gain, bias);
    for (int i = 0; i < 12; ++i) CHECK(y.data()[i] == doctest::Approx(0.0f));
}

TEST_CASE("layernorm with zero gain returns the bias") {
    Rng rng(17);
    Tensor x = tensor_from(ref64::random_vec(12, rng), {2, 6});
    Tensor gain = Tensor::zeros({6});
    Tensor bias = Tensor::from_data({6}, {1, 2, 3, 4, 5, 6});
    Tensor y = layernorm(x, gain, bias);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 6; ++j) CHECK(y.data()[i * 6 + j] == doctest::Approx(bias.data()[j]));
}

TEST_CASE("layernorm output mean is below 1e-5 with unit gain") {
    Rng rng(19);
    for (int trial = 0; trial < 10; ++trial) {
        const int d = 16;
        Tensor x = tensor_from(ref64::random_vec(3 * d, rng, -4.0, 4.0), {3, d});
        Tensor y = layernorm(x, Tensor::full({d}, 1.0f), Tensor::zeros({d}));
        for (int i = 0; i < 3; ++i) {
            float mean = 0.0f;
            for (int j = 0; j < d; ++j) mean += y.data()[i * d + j];
            mean /= static_cast<float>(d);
            CHECK(std::fabs(mean) < 1e-5f);
        }
    }
}

TEST_CASE("layernorm gradients match finite differences") {
    Rng rng(23);
    for (int trial = 0; trial < 10; ++trial) {
        const size_t rows = 2, d = 6;
        const ref64::Vec xv = ref64::random_vec(rows * d, rng);
        const ref64::Vec gv = ref64::random_vec(d, rng, 0.5, 1.5);
        const ref64::Vec bv = ref64::random_vec(d, rng, -0.5, 0.5);
        const ref64::Vec wv = ref64::random_vec(rows * d, rng, -1.0, 1.0);

        Tensor x = tensor_from(xv, {2, 6}, true);
        Tensor gain = tensor_from(gv, {6}, true);
        Tensor bias = tensor_from(bv, {6}, true);
        Tensor w = tensor_from(wv, {2, 6});
        Tape tape;
        Tensor loss = sum(mul(layernorm(x, gain, bias, 1e-5f, &tape), w, &tape), &tape);
        backward(loss, tape);

        auto f_x = [&](const ref64::Vec& v) {
            return ref64::weighted_sum(ref64::layernorm(v, gv, bv, rows, d, 1e-5), wv);
        };
        auto f_g = [&](const ref64::Vec& v) {
            return ref64::weighted_sum(ref64::layernorm(xv, v, bv, rows, d, 1e-5), wv);
        };
        auto f_b = [&](const ref64::Vec& v) {
            return ref64::weighted_sum(ref64::layernorm(xv, gv, v, rows, d, 1e-5), wv);
        };
        CHECK(ref64::grad_close(x.grad(), ref64::fd_gradient(f_x, xv), rows * d));
        CHECK(ref64::grad_close(gain.grad(), ref64::fd_gradient(f_g, gv), d));
        CHECK(ref64::grad_close(bias.grad(), ref64::fd_gradient(f_b, bv), d));
    }
}

TEST_CASE("gelu fixed points and asymptotes") {
    Tensor x = Tensor::from_data({4}, {0.0f, -10.0f, 10.0f, -1000.0f});
    Tensor y = gelu(x);
    CHECK(y.data()[0] == 0.0f);
    CHECK(std::fabs(y.data()[1]) < 1e-4f);
    CHECK(y.data()[2] == doctest::Approx(10.0f).epsilon(1e-3));
    CHECK(std::fabs(y.data()[3]) < 1e-4f);

    Tensor ye = gelu(x, GeluKind::Erf);
    CHECK(ye.data()[0] == 0.0f);
    CHECK(std::fabs(ye.data()[1]) < 1e-4f);
    CHECK(ye.data()[2] == doctest::Approx(10.0f).epsilon(1e-3));
}

TEST_CASE("gelu derivative matches finite differences for both variants") {
    Rng rng(29);
    for (int trial = 0; trial < 10; ++trial) {
        const size_t n = 12;
        const ref64::Vec xv = ref64::random_vec(n, rng, -3.0, 3.0);
        const ref64::Vec wv = ref64::random_vec(n, rng, -1.0, 1.0);
        for (const GeluKind kind : {GeluKind::Tanh, GeluKind::Erf}) {
            Tensor x = tensor_from(xv, {static_cast<int64_t>(n)}, true);
            Tensor w = tensor_from(wv, {static_cast<int64_t>(n)});
            Tape tape;
            Tensor loss = sum(mul(gelu(x, kind, &tape), w, &tape), &tape);
            backward(loss, tape);
            auto f = [&](const ref64::Vec& v) {
                return ref64::weighted_sum(
                    kind == GeluKind::Tanh ? ref64::gelu_tanh(v) : ref64::gelu_erf(v), wv);
            };
            CHECK(ref64::grad_close(x.grad(), ref64::fd_gradient(f, xv), n));
        }
    }
}

TEST_CASE("cross_entropy of uniform logits is ln(V)") {
    const int v = 256;
    Tensor logits = Tensor::zeros({3, v});
    std::vector<int32_t> targets{5, 77, 200};
    CeResult r = cross_entropy(logits, targets);
    CHECK(r.loss.item() == doctest::Approx(std::log(256.0)).epsilon(1e-4));
    CHECK(r.kept == 3);
    CHECK_FALSE(r.all_ignored);
}

TEST_CASE("cross_entropy goes to zero as the correct-logit margin grows") {
    const int v = 8;
    float prev = 100.0f;
    for (const float margin : {2.0f, 5.0f, 10.0f, 20.0f}) {
        Tensor logits = Tensor::zeros({1, v});
        logits.mut_data()[3] = margin;
        std::vector<int32_t> targets{3};
        const float loss = cross_entropy(logits, targets).loss.item();
        CHECK(loss < prev);
        prev = loss;
    }
    CHECK(prev < 1e-4f);
}

TEST_CASE("cross_entropy with every position ignored is zero and flagged") {
    Tensor logits = Tensor::zeros({3, 5});
    std::vector<int32_t> targets{-1, -1, -1};
    CeResult r = cross_entropy(logits, targets, -1);
    CHECK(r.loss.item() == 0.0f);
    CHECK(r.all_ignored);
    CHECK(r.kept == 0);
}

TEST_CASE("cross_entropy rejects out-of-range targets") {
    Tensor logits = Tensor::zeros({2, 5});
    std::vector<int32_t> targets{1, 5};
    CHECK_THROWS_AS((void)cross_entropy(logits, targets), ContractError);
}

TEST_CASE("cross_entropy gradient matches finite differences") {
    Rng rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        const size_t t = 4, v = 6;
        const ref64::Vec lv = ref64::random_vec(t * v, rng);
        std::vector<int32_t> targets(t);
        for (size_t i = 0; i < t; ++i)
            targets[i] = static_cast<int32_t>(rng.next_below(v));
        targets[1] = -1;  // one ignored position
        Tensor logits = tensor_from(lv, {4, 6}, true);
        Tape tape;
        CeResult r = cross_entropy(logits, targets, -1, &tape);
        backward(r.loss, tape);
        auto f = [&](const ref64::Vec& x) { return ref64::cross_entropy(x, targets, t, v, -1); };
        CHECK(ref64::grad_close(logits.grad(), ref64::fd_gradient(f, lv), t * v));
    }
}

TEST_CASE("backward of sum gives all-ones gradient") {
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tape tape;
    Tensor loss = sum(x, &tape);
    backward(loss, tape);
    for (int i = 0; i < 6; ++i) CHECK(x.grad()[i] == 1.0f);
}

TEST_CASE("two backward passes without zeroing double the gradients") {
    Tensor x = Tensor::from_data({2, 2}, {1, 2, 3, 4}, true);
    Tensor w = Tensor::from_data({2, 2}, {0.5f, -1.0f, 2.0f, 0.25f});
    Tape tape;
    Tensor loss = sum(mul(x, w, &tape), &tape);
    backward(loss, tape);
    std::vector<float> once(x.grad(), x.grad() + 4);
    backward(loss, tape);
    for (int i = 0; i < 4; ++i) CHECK(x.grad()[i] == 2.0f * once[i]);
}

TEST_CASE("backward rejects non-scalar losses and foreign tapes") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tape tape;
    Tensor y = scale(x, 2.0f, &tape);
    CHECK_THROWS_AS(backward(y, tape), ContractError);
    Tape other;
    Tensor loss = sum(x, &other);
    CHECK_THROWS_AS(backward(loss, tape), ContractError);
}

TEST_CASE("composite two-layer network gradient matches finite differences") {
    Rng rng(37);
    for (int trial = 0; trial < 5; ++trial) {
        const size_t m = 3, d = 4, h = 5, o = 2;
        const ref64::Vec xv = ref64::random_vec(m * d, rng, -1.0, 1.0);
        const ref64::Vec w1v = ref64::random_vec(d * h, rng, -1.0, 1.0);
        const ref64::Vec b1v = ref64::random_vec(h, rng, -0.5, 0.5);
        const ref64::Vec w2v = ref64::random_vec(h * o, rng, -1.0, 1.0);
        const ref64::Vec wv = ref64::random_vec(m * o, rng, -1.0, 1.0);

        Tensor x = tensor_from(xv, {3, 4});
        Tensor w1 = tensor_from(w1v, {4, 5}, true);
        Tensor b1 = tensor_from(b1v, {5}, true);
        Tensor w2 = tensor_from(w2v, {5, 2}, true);
        Tensor w = tensor_from(wv, {3, 2});
        Tape tape;
        Tensor hidden = gelu(add_row_bias(matmul(x, w1, &tape), b1, &tape), GeluKind::Tanh, &tape);
        Tensor out = matmul(hidden, w2, &tape);
        Tensor loss = sum(mul(out, w, &tape), &tape);
        backward(loss, tape);

        auto net = [&](const ref64::Vec& w1x, const ref64::Vec& b1x, const ref64::Vec& w2x) {
            ref64::Vec hid = ref64::matmul(xv, w1x, m, d, h);
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < h; ++j) hid[i * h + j] += b1x[j];
            hid = ref64::gelu_tanh(hid);
            return ref64::weighted_sum(ref64::matmul(hid, w2x, m, h, o), wv);
        };
        auto f_w1 = [&](const ref64::Vec& v) { return net(v, b1v, w2v); };
        auto f_b1 = [&](const ref64::Vec& v) { return net(w1v, v, w2v); };
        auto f_w2 = [&](const ref64::Vec& v) { return net(w1v, b1v, v); };
        CHECK(ref64::grad_close(w1.grad(), ref64::fd_gradient(f_w1, w1v), d * h));
        CHECK(ref64::grad_close(b1.grad(), ref64::fd_gradient(f_b1, b1v), h));
        CHECK(ref64::grad_close(w2.grad(), ref64::fd_gradient(f_w2, w2v), h * o));
    }
}

TEST_CASE("tape backward is bit-deterministic across runs") {
    auto run = []() {
        Rng rng(41);
        Tensor x = Tensor::randn({8, 8}, rng, 0.0f, 1.0f, true);
        Tensor w = Tensor::randn({8, 8}, rng, 0.0f, 1.0f, true);
        Tape tape;
        Tensor y = softmax(matmul(x, w, &tape), -1, &tape);
        Tensor loss = sum(mul(y, y, &tape), &tape);
        backward(loss, tape);
        std::vector<float> grads(x.grad(), x.grad() + 64);
        grads.insert(grads.end(), w.grad(), w.grad() + 64);
        return grads;
    };
    const auto a = run();
    const auto b = run();
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

TEST_CASE("ops never mutate their input buffers") {
    Rng rng(43);
    Tensor x = Tensor::randn({4, 4}, rng, 0.0f, 1.0f);
    std::vector<float> before(x.data(), x.data() + 16);
    (void)softmax(x);
    (void)gelu(x);
    (void)scale(x, 3.0f);
    (void)matmul(x, x);
    (void)transpose2d(x);
    CHECK(std::memcmp(before.data(), x.data(), 16 * sizeof(float)) == 0);
}

TEST_CASE("gradients accumulate into leaves but skip unreachable tensors") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor unrelated = Tensor::from_data({2}, {3, 4}, true);
    Tape tape;
    Tensor y = scale(x, 2.0f, &tape);
    Tensor z = scale(unrelated, 5.0f, &tape);  // recorded, not on the loss path
    Tensor loss = sum(y, &tape);
    backward(loss, tape);
    CHECK(x.grad()[0] == 2.0f);
    CHECK_FALSE(unrelated.has_grad());
    CHECK_FALSE(z.has_grad());
}
