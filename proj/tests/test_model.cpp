#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>

#include "aimkp/errors.hpp"
#include "aimkp/io.hpp"
#include "aimkp/model.hpp"
#include "aimkp/objective.hpp"

using namespace aimkp;

namespace {

ModelConfig tiny_config(uint64_t seed = 1) {
    ModelConfig c;
    c.visual_vocab = 6;
    c.text_vocab = 6;
    c.output_vocab = 10;
    c.grid_height = 2;
    c.grid_width = 2;
    c.embed_dim = 8;
    c.num_layers = 1;
    c.num_heads = 2;
    c.max_text_len = 4;
    c.max_target_len = 6;
    c.prompt_len = 1;
    c.seed = seed;
    return c;
}

Sample tiny_sample() {
    Sample s;
    s.id = "t0";
    s.grid_h = 2;
    s.grid_w = 2;
    s.grid = {0, 1, 2, 3};
    s.text = {0, 1, 2, 3};
    s.target = {4, kSepId, 5, kEosId};
    return s;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace

TEST_CASE("initialization is deterministic and layout covers the vector") {
    auto a = init_model(tiny_config(42));
    auto b = init_model(tiny_config(42));
    CHECK(a.values == b.values);

    int64_t offset = 0;
    for (const auto& e : a.layout.entries) {
        CHECK(e.offset == offset);
        offset += e.size();
    }
    CHECK(offset == a.layout.total);
    CHECK(static_cast<int64_t>(a.values.size()) == a.layout.total);
    CHECK(a.layout.total < 2000);
}

TEST_CASE("config validation rejects bad shapes and budgets") {
    auto c = tiny_config();
    c.embed_dim = 9; // not divisible by heads
    CHECK_THROWS_AS(init_model(c), std::invalid_argument);
    c = tiny_config();
    c.param_budget = 100;
    CHECK_THROWS_AS(init_model(c), std::invalid_argument);
    c = tiny_config();
    c.output_vocab = 2; // no room for prompt ids
    CHECK_THROWS_AS(init_model(c), std::invalid_argument);
}

TEST_CASE("zero-initialized output projection gives the uniform loss exactly") {
    auto params = init_model(tiny_config(3));
    auto s = tiny_sample();
    double nll = forward_nll(params, s, unmasked_plan(s.dims()));
    CHECK(nll == std::log(static_cast<double>(params.config.output_vocab)));
    CHECK(perplexity(params, s, unmasked_plan(s.dims())) ==
          doctest::Approx(params.config.output_vocab).epsilon(1e-12));
}

TEST_CASE("gamma=1 plans match the unmasked plan bit for bit") {
    auto params = init_model(tiny_config(4));
    // Perturb so logits are not uniform.
    std::mt19937_64 rng(5);
    std::normal_distribution<double> d(0.0, 0.05);
    for (auto& v : params.values) v += d(rng);
    auto s = tiny_sample();

    MaskPlan ones;
    ones.target = Modality::visual;
    ones.visual_mask = build_stride_mask_2d(2, 2, 1, MaskConvention::last_in_stride);
    ones.text_mask = build_stride_mask_1d(4, 1, MaskConvention::last_in_stride);
    ones.stride_used = 1;

    double a = forward_nll(params, s, unmasked_plan(s.dims()));
    double b = forward_nll(params, s, ones);
    CHECK(a == b);
}

TEST_CASE("dimension mismatches are rejected") {
    auto params = init_model(tiny_config(6));
    auto s = tiny_sample();
    s.grid_h = 3;
    s.grid.resize(6, 0);
    CHECK_THROWS_AS(forward_nll(params, s, unmasked_plan(s.dims())), std::invalid_argument);

    auto s2 = tiny_sample();
    s2.target.clear();
    CHECK_THROWS_AS(forward_nll(params, s2, unmasked_plan(s2.dims())), std::invalid_argument);

    auto s3 = tiny_sample();
    MaskPlan plan = unmasked_plan({2, 2, 3}); // wrong text mask length
    CHECK_THROWS_AS(forward_nll(params, s3, plan), std::invalid_argument);
}

TEST_CASE("analytic gradients match central differences") {
    auto params = init_model(tiny_config(7));
    std::mt19937_64 rng(8);
    std::normal_distribution<double> d(0.0, 0.05);
    for (auto& v : params.values) v += d(rng);
    auto s = tiny_sample();

    for (auto plan : {unmasked_plan(s.dims()),
                      compose_mask_plan(s.dims(), {2, 2}, Modality::visual),
                      compose_mask_plan(s.dims(), {2, 2}, Modality::text)}) {
        auto analytic = backward(params, s, plan);
        auto fd = finite_difference_gradient(params, s, plan, 1e-5);
        CHECK(cosine_similarity(analytic, fd) >= 0.999);
        CHECK(max_abs_diff(analytic.values, fd.values) <= 1e-4);
    }
}

TEST_CASE("halving epsilon shrinks the finite-difference error") {
    auto params = init_model(tiny_config(9));
    std::mt19937_64 rng(10);
    std::normal_distribution<double> d(0.0, 0.05);
    for (auto& v : params.values) v += d(rng);
    auto s = tiny_sample();
    auto plan = unmasked_plan(s.dims());
    auto analytic = backward(params, s, plan);
    double coarse = max_abs_diff(analytic.values,
                                 finite_difference_gradient(params, s, plan, 2e-3).values);
    double fine = max_abs_diff(analytic.values,
                               finite_difference_gradient(params, s, plan, 1e-3).values);
    CHECK(fine < coarse);
}

TEST_CASE("unused embedding rows receive zero gradient") {
    auto params = init_model(tiny_config(11));
    auto s = tiny_sample(); // text uses ids 0..3; ids 4,5 unused
    auto grad = backward(params, s, unmasked_plan(s.dims()));
    const auto& e = params.layout.entry(params.layout.txt_emb);
    int d = params.config.embed_dim;
    for (int row : {4, 5}) {
        for (int jj = 0; jj < d; ++jj) {
            CHECK(grad.values[static_cast<size_t>(e.offset + row * d + jj)] == 0.0);
        }
    }
}

TEST_CASE("summing a sample's gradient with itself doubles it exactly") {
    auto params = init_model(tiny_config(12));
    auto s = tiny_sample();
    auto plan = unmasked_plan(s.dims());
    // Accumulation sums per-sample gradient vectors, so two identical samples
    // contribute g + g == 2g bitwise.
    auto g1 = backward(params, s, plan);
    auto g2 = backward(params, s, plan);
    REQUIRE(g1.values == g2.values);
    bool all_exact = true;
    for (size_t i = 0; i < g1.values.size(); ++i)
        if (g1.values[i] + g2.values[i] != 2.0 * g1.values[i]) all_exact = false;
    CHECK(all_exact);
}

TEST_CASE("masked tokens are invisible to the loss bit for bit") {
    auto params = init_model(tiny_config(13));
    std::mt19937_64 rng(14);
    std::normal_distribution<double> d(0.0, 0.05);
    for (auto& v : params.values) v += d(rng);

    auto s = tiny_sample();
    auto plan = compose_mask_plan(s.dims(), {2, 2}, Modality::visual); // keeps only (1,1)
    double before = forward_nll(params, s, plan);
    auto mutated = s;
    mutated.grid[0] = (mutated.grid[0] + 1) % params.config.visual_vocab;
    mutated.grid[1] = (mutated.grid[1] + 2) % params.config.visual_vocab;
    double after = forward_nll(params, mutated, plan);
    CHECK(before == after);

    auto tplan = compose_mask_plan(s.dims(), {2, 2}, Modality::text); // keeps text {1,3}
    double tbefore = forward_nll(params, s, tplan);
    auto tmut = s;
    tmut.text[0] = 5;
    tmut.text[2] = 4;
    double tafter = forward_nll(params, tmut, tplan);
    CHECK(tbefore == tafter);
}

TEST_CASE("transposing a non-symmetric grid changes the loss") {
    auto params = init_model(tiny_config(15));
    std::mt19937_64 rng(16);
    std::normal_distribution<double> d(0.0, 0.05);
    for (auto& v : params.values) v += d(rng);
    auto s = tiny_sample(); // grid {0,1,2,3}
    auto t = s;
    t.grid = {0, 2, 1, 3}; // transpose
    double a = forward_nll(params, s, unmasked_plan(s.dims()));
    double b = forward_nll(params, t, unmasked_plan(t.dims()));
    CHECK(a != b);
}

TEST_CASE("finite differences vanish on coordinates the loss ignores") {
    auto params = init_model(tiny_config(17));
    auto s = tiny_sample();
    // Mask everything except (1,1): grid token ids 0,1,2 become invisible and
    // id 3 is the only visible one; rows 0..2 of vis_emb are constant-loss.
    auto plan = compose_mask_plan(s.dims(), {2, 2}, Modality::visual);
    const auto& e = params.layout.entry(params.layout.vis_emb);
    std::vector<int64_t> coords;
    for (int jj = 0; jj < params.config.embed_dim; ++jj) coords.push_back(e.offset + jj); // row 0
    auto fd = finite_difference_gradient(params, s, plan, 1e-4, coords);
    for (int64_t c : coords) CHECK(fd.values[static_cast<size_t>(c)] == 0.0);
}

TEST_CASE("a short optimization run reduces the loss") {
    auto params = init_model(tiny_config(18));
    std::vector<Sample> set;
    std::mt19937_64 rng(19);
    for (int i = 0; i < 10; ++i) {
        Sample s = tiny_sample();
        s.id = "t" + std::to_string(i);
        for (auto& g : s.grid) g = static_cast<int>(rng() % 6);
        for (auto& t : s.text) t = static_cast<int>(rng() % 6);
        s.target = {static_cast<int>(4 + rng() % 6), kEosId};
        set.push_back(std::move(s));
    }
    auto mean_loss = [&]() {
        double total = 0.0;
        for (const auto& s : set) total += forward_nll(params, s, unmasked_plan(s.dims()));
        return total / set.size();
    };
    double before = mean_loss();
    AdamState adam;
    for (int step = 0; step < 200; ++step) {
        std::vector<double> grad;
        for (const auto& s : set) backward_accumulate(params, s, unmasked_plan(s.dims()), 1.0, grad);
        adam_update(params, grad, adam, 3e-3);
    }
    CHECK(mean_loss() < before);
}

TEST_CASE("non-finite parameters abort with a numeric error") {
    auto params = init_model(tiny_config(20));
    params.values[0] = std::numeric_limits<double>::quiet_NaN();
    auto s = tiny_sample();
    CHECK_THROWS_AS(forward_nll(params, s, unmasked_plan(s.dims())), NumericError);
}

TEST_CASE("checkpoints round-trip and validate") {
    auto params = init_model(tiny_config(21));
    std::filesystem::path tmp = std::filesystem::temp_directory_path() / "aimkp_ckpt_test.bin";
    save_checkpoint(params, tmp.string());
    auto loaded = load_checkpoint(tmp.string());
    CHECK(loaded.values == params.values);
    CHECK(loaded.config == params.config);
    CHECK(param_digest(loaded) == param_digest(params));

    // Corrupt the magic.
    std::string raw = read_file(tmp.string());
    raw[0] = 'X';
    write_file_atomic(tmp.string(), raw);
    CHECK_THROWS_AS(load_checkpoint(tmp.string()), DataError);
    std::filesystem::remove(tmp);
}

TEST_CASE("ablated modalities produce a well-defined loss") {
    auto params = init_model(tiny_config(22));
    auto s = tiny_sample();
    s.grid_h = s.grid_w = 0;
    s.grid.clear();
    s.text.clear();
    double nll = forward_nll(params, s, unmasked_plan(s.dims()));
    CHECK(std::isfinite(nll));
    CHECK(nll == std::log(static_cast<double>(params.config.output_vocab)));
}
