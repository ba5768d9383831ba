#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "masters/checkpoint.hpp"
#include "masters/masking.hpp"
#include "masters/model.hpp"
#include "masters/rng.hpp"

using namespace masters;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 11;
    cfg.context_len = 8;
    cfg.n_layers = 1;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.seed = 3;
    return cfg;
}

// Straight-line re-implementation of the architecture with its own layout
// and loop structure, used as an independent oracle for forward().
std::vector<std::vector<double>> oracle_forward(const ModelConfig& cfg, const ParameterView& pv,
                                                const std::vector<int>& tokens) {
    const int T = static_cast<int>(tokens.size());
    const int d = static_cast<int>(cfg.d_model);
    const int H = static_cast<int>(cfg.n_heads);
    const int hd = d / H;
    const double eps = 1e-5;

    auto norm = [&](const std::vector<double>& x, const std::vector<double>& g) {
        double ms = 0.0;
        for (double v : x) ms += v * v;
        ms = ms / d + eps;
        const double inv = 1.0 / std::sqrt(ms);
        std::vector<double> y(d);
        for (int i = 0; i < d; ++i) y[i] = g[i] * x[i] * inv;
        return y;
    };
    auto apply = [&](const std::vector<double>& w, int rows, int cols,
                     const std::vector<double>& x) {
        std::vector<double> y(rows, 0.0);
        for (int c = 0; c < cols; ++c)
            for (int r = 0; r < rows; ++r) y[r] += w[r * cols + c] * x[c];
        return y;
    };

    std::vector<std::vector<double>> stream(T, std::vector<double>(d));
    const auto& te = pv.at("embed.token").values;
    const auto& pe = pv.at("embed.pos").values;
    for (int t = 0; t < T; ++t)
        for (int i = 0; i < d; ++i) stream[t][i] = te[tokens[t] * d + i] + pe[t * d + i];

    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        const auto& ga = pv.at(p + "attn_norm.gain").values;
        const auto& wq = pv.at(p + "attn.wq").values;
        const auto& wk = pv.at(p + "attn.wk").values;
        const auto& wv = pv.at(p + "attn.wv").values;
        const auto& wo = pv.at(p + "attn.wo").values;
        const auto& gm = pv.at(p + "mlp_norm.gain").values;
        const auto& w1 = pv.at(p + "mlp.w_in").values;
        const auto& w2 = pv.at(p + "mlp.w_out").values;

        std::vector<std::vector<double>> q(T), k(T), v(T);
        for (int t = 0; t < T; ++t) {
            const auto h = norm(stream[t], ga);
            q[t] = apply(wq, d, d, h);
            k[t] = apply(wk, d, d, h);
            v[t] = apply(wv, d, d, h);
        }
        for (int t = 0; t < T; ++t) {
            std::vector<double> cat(d, 0.0);
            for (int head = 0; head < H; ++head) {
                std::vector<double> sc(t + 1);
                for (int u = 0; u <= t; ++u) {
                    double dot = 0.0;
                    for (int j = 0; j < hd; ++j)
                        dot += q[t][head * hd + j] * k[u][head * hd + j];
                    sc[u] = dot / std::sqrt(static_cast<double>(hd));
                }
                double mx = sc[0];
                for (double s : sc) mx = std::max(mx, s);
                double z = 0.0;
                for (auto& s : sc) {
                    s = std::exp(s - mx);
                    z += s;
                }
                for (int u = 0; u <= t; ++u)
                    for (int j = 0; j < hd; ++j)
                        cat[head * hd + j] += sc[u] / z * v[u][head * hd + j];
            }
            const auto o = apply(wo, d, d, cat);
            for (int i = 0; i < d; ++i) stream[t][i] += o[i];
        }
        for (int t = 0; t < T; ++t) {
            const auto h = norm(stream[t], gm);
            auto a = apply(w1, 4 * d, d, h);
            for (auto& x : a) {
                const double u = std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x);
                x = 0.5 * x * (1.0 + std::tanh(u));
            }
            const auto o = apply(w2, d, 4 * d, a);
            for (int i = 0; i < d; ++i) stream[t][i] += o[i];
        }
    }

    const auto& gf = pv.at("final_norm.gain").values;
    const auto& un = pv.at("unembed").values;
    std::vector<std::vector<double>> rows(T);
    for (int t = 0; t < T; ++t)
        rows[t] = apply(un, static_cast<int>(cfg.vocab_size), d, norm(stream[t], gf));
    return rows;
}

double scalar_loss(const Model& model, const std::vector<int>& tokens,
                   const std::vector<std::vector<double>>& weights) {
    // sum_t sum_v weights[t][v] * logits[t][v] -- a generic linear probe loss
    const auto rows = model.forward(tokens);
    double loss = 0.0;
    for (size_t t = 0; t < rows.size(); ++t)
        for (size_t v = 0; v < rows[t].values.size(); ++v)
            loss += weights[t][v] * rows[t].values[v];
    return loss;
}

}  // namespace

TEST_CASE("zero-initialized model yields all-zero logits") {
    const Model model(tiny_config());
    const std::vector<int> tokens{3};
    const auto rows = model.forward(tokens);
    REQUIRE(rows.size() == 1);
    for (double v : rows[0].values) CHECK(v == 0.0);
}

TEST_CASE("forward is bitwise deterministic") {
    const Model model = Model::random_init(tiny_config());
    const std::vector<int> tokens{1, 4, 9, 2, 2};
    const auto a = model.forward(tokens);
    const auto b = model.forward(tokens);
    for (size_t t = 0; t < a.size(); ++t)
        for (size_t v = 0; v < a[t].values.size(); ++v)
            CHECK(a[t].values[v] == b[t].values[v]);
}

TEST_CASE("forward matches an independent straight-line implementation") {
    ModelConfig cfg;
    cfg.vocab_size = 13;
    cfg.context_len = 10;
    cfg.n_layers = 3;
    cfg.d_model = 12;
    cfg.n_heads = 3;
    cfg.seed = 7;
    const Model model = Model::random_init(cfg);
    const std::vector<int> tokens{5, 1, 12, 0, 7, 7, 3};

    const auto got = model.forward(tokens);
    const auto want = oracle_forward(cfg, model.params(), tokens);
    for (size_t t = 0; t < tokens.size(); ++t) {
        for (size_t v = 0; v < static_cast<size_t>(cfg.vocab_size); ++v) {
            const double scale = std::max(1.0, std::fabs(want[t][v]));
            CHECK(std::fabs(got[t].values[v] - want[t][v]) / scale <= 1e-6);
        }
    }
}

TEST_CASE("forward rejects bad inputs") {
    const Model model(tiny_config());
    CHECK_THROWS_AS((void)model.forward(std::vector<int>{}), LengthError);
    CHECK_THROWS_AS((void)model.forward(std::vector<int>(9, 1)), LengthError);
    CHECK_THROWS_AS((void)model.forward(std::vector<int>{11}), VocabError);
    CHECK_THROWS_AS((void)model.forward(std::vector<int>{-1}), VocabError);
}

TEST_CASE("log_softmax basics") {
    SUBCASE("uniform logits") {
        const std::vector<double> row(7, 3.25);
        const auto lp = log_softmax(std::span<const double>(row));
        for (double v : lp) CHECK(v == doctest::Approx(std::log(1.0 / 7.0)).epsilon(1e-12));
    }
    SUBCASE("two-class closed form") {
        const std::vector<double> row{0.0, std::log(3.0)};
        const auto lp = log_softmax(std::span<const double>(row));
        CHECK(lp[0] == doctest::Approx(std::log(0.25)).epsilon(1e-12));
        CHECK(lp[1] == doctest::Approx(std::log(0.75)).epsilon(1e-12));
    }
    SUBCASE("shift invariance") {
        std::mt19937 gen(11);
        std::uniform_real_distribution<double> dist(-4.0, 4.0);
        std::vector<double> row(16), shifted(16);
        for (size_t i = 0; i < row.size(); ++i) {
            row[i] = dist(gen);
            shifted[i] = row[i] + 100.0;
        }
        const auto a = log_softmax(std::span<const double>(row));
        const auto b = log_softmax(std::span<const double>(shifted));
        for (size_t i = 0; i < row.size(); ++i) CHECK(std::fabs(a[i] - b[i]) <= 1e-9);
    }
    SUBCASE("normalization") {
        Rng rng(19);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<double> row(9);
            for (auto& v : row) v = 6.0 * rng.next_gaussian();
            const auto lp = log_softmax(std::span<const double>(row));
            double sum = 0.0;
            for (double v : lp) sum += std::exp(v);
            CHECK(std::fabs(sum - 1.0) <= 1e-9);
        }
    }
    SUBCASE("non-finite input") {
        const std::vector<double> row{1.0, std::numeric_limits<double>::infinity()};
        CHECK_THROWS_AS((void)log_softmax(std::span<const double>(row)), NumericError);
    }
}

TEST_CASE("zero upstream gradient gives zero parameter gradient") {
    const Model model = Model::random_init(tiny_config());
    const std::vector<int> tokens{1, 2, 3};
    const std::vector<std::vector<double>> dlogits(3, std::vector<double>(11, 0.0));
    const auto grad = model.backward(tokens, dlogits);
    for (const auto& entry : grad.entries)
        for (double v : entry.values) CHECK(v == 0.0);
}

TEST_CASE("backward rejects mismatched shapes") {
    const Model model = Model::random_init(tiny_config());
    const std::vector<int> tokens{1, 2, 3};
    CHECK_THROWS_AS((void)model.backward(tokens, std::vector<std::vector<double>>(2)),
                    StructuralError);
    CHECK_THROWS_AS(
        (void)model.backward(tokens, std::vector<std::vector<double>>(3, std::vector<double>(5))),
        StructuralError);
}

TEST_CASE("backward matches central finite differences") {
    ModelConfig cfg = tiny_config();
    cfg.seed = 21;
    Model model = Model::random_init(cfg);
    REQUIRE(model.param_count() <= 5000);
    const std::vector<int> tokens{4, 9, 1, 6};

    // fixed random linear probe over logits
    std::mt19937 gen(5);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    std::vector<std::vector<double>> weights(tokens.size(), std::vector<double>(cfg.vocab_size));
    for (auto& row : weights)
        for (auto& w : row) w = dist(gen);

    const auto analytic = model.backward(tokens, weights);

    const double h = 1e-4;
    Rng pick(99);
    for (size_t e = 0; e < analytic.entries.size(); ++e) {
        auto& values = model.params().entries[e].values;
        // every entry gets sampled coordinates; small entries get full coverage
        const size_t samples = std::min<size_t>(values.size(), 24);
        for (size_t s = 0; s < samples; ++s) {
            const size_t i = values.size() <= 24 ? s : pick.next_below(values.size());
            const double keep = values[i];
            values[i] = keep + h;
            const double up = scalar_loss(model, tokens, weights);
            values[i] = keep - h;
            const double down = scalar_loss(model, tokens, weights);
            values[i] = keep;
            const double fd = (up - down) / (2.0 * h);
            const double an = analytic.entries[e].values[i];
            const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-6});
            CHECK(std::fabs(fd - an) / denom <= 1e-3);
        }
    }
}

TEST_CASE("cross-entropy gradient at the unembedding output is softmax minus one-hot") {
    ModelConfig cfg = tiny_config();
    cfg.seed = 33;
    Model model = Model::random_init(cfg);
    const std::vector<int> tokens{2, 7, 5};
    const int target = 8;  // "true next token" after the last position

    const auto rows = model.forward(tokens);
    const auto lp = log_softmax(rows.back());

    // dLoss/dlogit for -log p(target), via central differences on the logits
    const double h = 1e-6;
    for (int64_t v = 0; v < cfg.vocab_size; ++v) {
        auto bump = rows.back().values;
        bump[v] += h;
        const double up = -log_softmax(std::span<const double>(bump))[target];
        bump[v] -= 2 * h;
        const double down = -log_softmax(std::span<const double>(bump))[target];
        const double fd = (up - down) / (2.0 * h);
        const double analytic = std::exp(lp[v]) - (v == target ? 1.0 : 0.0);
        CHECK(std::fabs(fd - analytic) <= 1e-5);
    }
}

TEST_CASE("parameter enumeration is a pure function of the config") {
    const Model a(tiny_config());
    const Model b(tiny_config());
    REQUIRE(a.params().entries.size() == b.params().entries.size());
    for (size_t i = 0; i < a.params().entries.size(); ++i) {
        CHECK(a.params().entries[i].name == b.params().entries[i].name);
        CHECK(a.params().entries[i].shape == b.params().entries[i].shape);
    }
    CHECK(a.params().total_count() == a.param_count());
}

TEST_CASE("checkpoint round-trip is bit-exact") {
    ModelConfig cfg = tiny_config();
    cfg.seed = 77;
    const Model model = Model::random_init(cfg);
    const auto path = std::filesystem::temp_directory_path() / "masters_test_model.ckpt";
    save_model(model, path);
    const Model loaded = load_model(path);

    CHECK(loaded.config() == model.config());
    REQUIRE(loaded.params().entries.size() == model.params().entries.size());
    for (size_t e = 0; e < model.params().entries.size(); ++e) {
        const auto& a = model.params().entries[e];
        const auto& b = loaded.params().entries[e];
        CHECK(a.name == b.name);
        CHECK(a.shape == b.shape);
        REQUIRE(a.values.size() == b.values.size());
        for (size_t i = 0; i < a.values.size(); ++i) CHECK(a.values[i] == b.values[i]);
    }
    std::filesystem::remove(path);
}
