#include "doctest.h"

#include <cmath>
#include <map>

#include "aimkp/data.hpp"
#include "aimkp/errors.hpp"
#include "aimkp/io.hpp"
#include "aimkp/model.hpp"
#include "aimkp/objective.hpp"
#include "aimkp/rng.hpp"

using namespace aimkp;

namespace {

GradientVector gv(std::vector<double> v) {
    GradientVector g;
    g.values = std::move(v);
    g.finalize_norm();
    return g;
}

Dataset tiny_dataset(int n = 30, uint64_t seed = 7) {
    GenSpec spec;
    spec.n_samples = n;
    spec.seed = seed;
    spec.n_visual_concepts = 4;
    spec.n_text_concepts = 4;
    spec.n_joint_concepts = 2;
    spec.n_visual_distractors = 6;
    spec.n_text_distractors = 6;
    return generate_synthetic(spec);
}

ModelConfig tiny_model(const Dataset& ds) {
    ModelConfig mc = model_config_for(ds);
    mc.embed_dim = 16;
    mc.num_layers = 1;
    mc.num_heads = 2;
    return mc;
}

TrainConfig quick_train(Schedule schedule, uint64_t seed = 1) {
    TrainConfig cfg;
    cfg.schedule = schedule;
    cfg.epochs = 2;
    cfg.warmup_epochs = 1;
    cfg.seed = seed;
    return cfg;
}

} // namespace

TEST_CASE("cosine similarity on worked examples") {
    CHECK(cosine_similarity(gv({1, 2, 2}), gv({1, 2, 2})) == 1.0);
    CHECK(cosine_similarity(gv({1, 0}), gv({0, 1})) == 0.0);
    CHECK(cosine_similarity(gv({1, 2, 2}), gv({2, 1, 2})) ==
          doctest::Approx(8.0 / 9.0).epsilon(1e-15));
    bool degenerate = false;
    CHECK(cosine_similarity(gv({0, 0}), gv({1, 1}), &degenerate) == 0.0);
    CHECK(degenerate);
    CHECK_THROWS_AS(cosine_similarity(gv({1}), gv({1, 2})), std::invalid_argument);
}

TEST_CASE("the decision is invariant to positive gradient rescaling") {
    std::mt19937_64 rng(23);
    std::normal_distribution<double> d(0.0, 1.0);
    for (int it = 0; it < 50; ++it) {
        std::vector<double> a(40), b(40);
        for (auto& v : a) v = d(rng);
        for (auto& v : b) v = d(rng);
        double s = cosine_similarity(gv(a), gv(b));
        // Power-of-two scales commute with the arithmetic exactly.
        for (double c : {0.25, 4.0, 1024.0}) {
            std::vector<double> bs(b);
            for (auto& v : bs) v *= c;
            CHECK(cosine_similarity(gv(a), gv(bs)) == s);
            std::vector<double> as(a);
            for (auto& v : as) v *= c;
            CHECK(cosine_similarity(gv(as), gv(b)) == s);
        }
        for (double c : {0.37, 11.9}) {
            std::vector<double> bs(b);
            for (auto& v : bs) v *= c;
            double s2 = cosine_similarity(gv(a), gv(bs));
            CHECK(s2 == doctest::Approx(s).epsilon(1e-12));
            CHECK(filter_switch(s2, 0.4) == filter_switch(s, 0.4));
        }
    }
}

TEST_CASE("filter switch is boundary inclusive and tau=-1 accepts all") {
    CHECK(filter_switch(0.40, 0.40) == 1);
    CHECK(filter_switch(0.09, 0.10) == 0);
    for (double s : {-1.0, -0.5, 0.0, 1.0}) CHECK(filter_switch(s, -1.0) == 1);
}

TEST_CASE("total gradient applies unit-weight switches") {
    auto g = gv({1, 1, 1});
    auto a = gv({0.5, 0, 0});
    auto b = gv({0, 0.25, 0});

    FilterDecision none;
    auto out0 = total_gradient(g, a, b, none);
    CHECK(out0.values == g.values);

    FilterDecision both;
    both.lambda_visual = 1;
    both.lambda_text = 1;
    auto out2 = total_gradient(g, a, b, both);
    CHECK(out2.values == std::vector<double>{1.5, 1.25, 1.0});

    FilterDecision vis_only;
    vis_only.lambda_visual = 1;
    auto out1 = total_gradient(g, a, b, vis_only);
    CHECK(out1.values == std::vector<double>{1.5, 1.0, 1.0});

    FilterDecision bad;
    bad.lambda_visual = 1;
    CHECK_THROWS_AS(total_gradient(g, gv({1}), b, bad), std::invalid_argument);
}

TEST_CASE("stride updates double and halve with caps and floor") {
    StrideState state;
    register_sample(state, "a", {6, 6, 12}, 2);
    CHECK(stride_entry(state, "a").cap_visual == 4);
    CHECK(stride_entry(state, "a").cap_text == 8);

    update_stride(state, "a", Modality::visual, 1);
    CHECK(stride_entry(state, "a").gamma_visual == 4);
    update_stride(state, "a", Modality::visual, 1); // capped
    CHECK(stride_entry(state, "a").gamma_visual == 4);
    update_stride(state, "a", Modality::visual, 0);
    CHECK(stride_entry(state, "a").gamma_visual == 2);
    update_stride(state, "a", Modality::visual, 0); // floor 2
    CHECK(stride_entry(state, "a").gamma_visual == 2);

    update_stride(state, "a", Modality::text, 1);
    update_stride(state, "a", Modality::text, 1);
    CHECK(stride_entry(state, "a").gamma_text == 8);
    update_stride(state, "a", Modality::text, 0);
    CHECK(stride_entry(state, "a").gamma_text == 4);

    CHECK_THROWS_AS(update_stride(state, "zz", Modality::text, 1), std::invalid_argument);

    register_sample(state, "b", {0, 0, 1}, 2); // unmaskable on both axes
    CHECK_FALSE(stride_entry(state, "b").visual_maskable());
    CHECK_FALSE(stride_entry(state, "b").text_maskable());
}

TEST_CASE("identity masks give similarity one and acceptance") {
    Dataset ds = tiny_dataset(10);
    auto mc = tiny_model(ds);
    auto params = init_model(mc);
    const Sample& s = ds.samples.front().sample;
    // gamma=1 stride masks are all-ones, so the masked gradient equals the
    // original gradient exactly.
    MaskPlan ones;
    ones.target = Modality::visual;
    ones.visual_mask = build_stride_mask_2d(s.grid_h, s.grid_w, 1, MaskConvention::last_in_stride);
    ones.text_mask = build_stride_mask_1d(static_cast<int>(s.text.size()), 1,
                                          MaskConvention::last_in_stride);
    ones.stride_used = 1;
    auto g = backward(params, s, unmasked_plan(s.dims()));
    auto g2 = backward(params, s, ones);
    double sim = cosine_similarity(g, g2);
    CHECK(sim == 1.0);
    CHECK(filter_switch(sim, 0.4) == 1);
}

TEST_CASE("a step with both variants rejected matches plain training bitwise") {
    Dataset ds = tiny_dataset(10);
    auto mc = tiny_model(ds);
    auto params = init_model(mc);
    const Sample& s = ds.samples.front().sample;

    StrideEntry entry;
    entry.gamma_visual = 2;
    entry.gamma_text = 2;
    entry.cap_visual = 4;
    entry.cap_text = 8;
    StepConfig cfg;
    cfg.tau_v = 1.5; // unreachable: every variant rejected
    cfg.tau_t = 1.5;
    auto step = train_step(params, s, entry, cfg, 0);
    CHECK(step.record.lambda_v == 0);
    CHECK(step.record.lambda_t == 0);
    auto plain = backward(params, s, unmasked_plan(s.dims()));
    CHECK(step.total.values == plain.values);
}

TEST_CASE("train_step records losses, scores, and strides") {
    Dataset ds = tiny_dataset(10);
    auto mc = tiny_model(ds);
    auto params = init_model(mc);
    const Sample& s = ds.samples.front().sample;
    StrideEntry entry;
    entry.gamma_visual = 2;
    entry.gamma_text = 2;
    entry.cap_visual = 4;
    entry.cap_text = 8;
    StepConfig cfg;
    auto step = train_step(params, s, entry, cfg, 3);
    CHECK(step.record.epoch == 3);
    CHECK(step.record.gamma_v == 2);
    CHECK(step.record.gamma_t == 2);
    REQUIRE(step.record.s_v.has_value());
    REQUIRE(step.record.s_t.has_value());
    CHECK(*step.record.s_v >= -1.0);
    CHECK(*step.record.s_v <= 1.0);
    CHECK(step.record.lambda_v == filter_switch(*step.record.s_v, cfg.tau_v));
    CHECK(step.record.lambda_t == filter_switch(*step.record.s_t, cfg.tau_t));
    REQUIRE(step.record.loss_v_masked.has_value());
    REQUIRE(step.record.loss_t_masked.has_value());
}

TEST_CASE("adam and the lr schedule are deterministic and sane") {
    AdamState a1, a2;
    ModelConfig mc;
    mc.visual_vocab = mc.text_vocab = 2;
    mc.output_vocab = 4;
    mc.grid_height = mc.grid_width = 1;
    mc.embed_dim = 4;
    mc.num_layers = 1;
    mc.num_heads = 1;
    mc.max_text_len = 2;
    mc.max_target_len = 2;
    mc.prompt_len = 1;
    auto p1 = init_model(mc);
    auto p2 = init_model(mc);
    std::vector<double> grad(p1.values.size(), 0.125);
    adam_update(p1, grad, a1, 1e-2);
    adam_update(p2, grad, a2, 1e-2);
    CHECK(p1.values == p2.values);

    CHECK(lr_at_step(1.0, 0, 100, 0.03) == doctest::Approx(1.0 / 3.0));
    CHECK(lr_at_step(1.0, 2, 100, 0.03) == 1.0);
    CHECK(lr_at_step(1.0, 99, 100, 0.03) < 0.01);
    CHECK(lr_at_step(1.0, 50, 100, 0.03) <= 1.0);
}

TEST_CASE("telemetry aggregation and the decision log round-trip") {
    std::vector<DecisionRecord> decisions;
    DecisionRecord d1;
    d1.sample_id = "a";
    d1.epoch = 1;
    d1.s_v = 0.5;
    d1.s_t = 0.05;
    d1.lambda_v = 1;
    d1.lambda_t = 0;
    d1.gamma_v = 2;
    d1.gamma_t = 2;
    d1.loss = 1.5;
    d1.loss_v_masked = 1.6;
    d1.loss_t_masked = 1.9;
    DecisionRecord d2 = d1;
    d2.sample_id = "b";
    d2.s_v = 0.7;
    d2.gamma_v = 4;
    DecisionRecord d3;
    d3.sample_id = "c";
    d3.epoch = 1;
    d3.s_t = 0.3;
    d3.lambda_t = 1;
    d3.gamma_v = 2;
    d3.gamma_t = 4;
    d3.loss = 1.0;
    d3.loss_t_masked = 1.2; // visual variant skipped
    decisions = {d1, d2, d3};

    auto telemetry = aggregate_telemetry(decisions);
    REQUIRE(telemetry.size() == 2);
    CHECK(telemetry[0].modality == Modality::visual);
    CHECK(telemetry[0].mean_cos_sim == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(telemetry[0].accepted_count == 2);
    CHECK(telemetry[0].rejected_count == 0);
    CHECK(telemetry[0].pct_above_threshold == 100.0);
    CHECK(telemetry[0].mean_stride == 3.0);
    CHECK(telemetry[1].modality == Modality::text);
    CHECK(telemetry[1].accepted_count == 1);
    CHECK(telemetry[1].rejected_count == 2);

    auto parsed = decisions_from_jsonl(decisions_to_jsonl(decisions));
    REQUIRE(parsed.size() == 3);
    CHECK_FALSE(parsed[2].s_v.has_value());
    CHECK(telemetry_to_csv(aggregate_telemetry(parsed)) == telemetry_to_csv(telemetry));

    try {
        decisions_from_jsonl("{}\n");
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("line 1") != std::string::npos);
    }
}

TEST_CASE("run_training with zero epochs returns the initialized model") {
    Dataset ds = tiny_dataset(20);
    auto mc = tiny_model(ds);
    TrainConfig cfg = quick_train(Schedule::fixed);
    cfg.epochs = 0;
    cfg.warmup_epochs = 0;
    cfg.tau_v = cfg.tau_t = -1.0;
    auto result = run_training(make_train_data(ds), mc, cfg);
    ModelConfig expected = mc;
    expected.seed = derive_seed(cfg.seed, "model-seed");
    auto fresh = init_model(expected);
    CHECK(result.final_params.values == fresh.values);
    CHECK(result.best_params.values == fresh.values);
    CHECK(result.decisions.empty());
}

TEST_CASE("warm-up epochs are plain fine-tuning for every schedule") {
    Dataset ds = tiny_dataset(16);
    auto mc = tiny_model(ds);
    auto base_cfg = quick_train(Schedule::baseline, 5);
    base_cfg.epochs = 1;
    auto aimkp_cfg = quick_train(Schedule::aimkp, 5);
    aimkp_cfg.epochs = 1; // only the warm-up epoch
    auto r1 = run_training(make_train_data(ds), mc, base_cfg);
    auto r2 = run_training(make_train_data(ds), mc, aimkp_cfg);
    CHECK(r1.final_params.values == r2.final_params.values);
    CHECK(r2.decisions.empty());
}

TEST_CASE("aimkp and no-filter diverge only after the first rejection") {
    Dataset ds = tiny_dataset(16, 11);
    auto mc = tiny_model(ds);
    auto a_cfg = quick_train(Schedule::aimkp, 3);
    a_cfg.epochs = 2;
    a_cfg.tau_v = 2.0; // unreachable threshold: every variant rejected
    a_cfg.tau_t = 2.0;
    auto n_cfg = quick_train(Schedule::no_filter, 3);
    n_cfg.epochs = 2;
    auto ra = run_training(make_train_data(ds), mc, a_cfg);
    auto rn = run_training(make_train_data(ds), mc, n_cfg);
    REQUIRE(!ra.decisions.empty());
    REQUIRE(ra.decisions.size() == rn.decisions.size());

    size_t first_reject = ra.decisions.size();
    for (size_t i = 0; i < ra.decisions.size(); ++i) {
        if (ra.decisions[i].lambda_v == 0 || ra.decisions[i].lambda_t == 0) {
            first_reject = i;
            break;
        }
    }
    REQUIRE(first_reject < ra.decisions.size()); // tau 0.9 rejects something
    for (size_t i = 0; i <= first_reject; ++i) {
        CHECK(ra.decisions[i].sample_id == rn.decisions[i].sample_id);
        CHECK(*ra.decisions[i].s_v == *rn.decisions[i].s_v);
        CHECK(*ra.decisions[i].s_t == *rn.decisions[i].s_t);
        CHECK(ra.decisions[i].gamma_v == rn.decisions[i].gamma_v);
        CHECK(ra.decisions[i].gamma_t == rn.decisions[i].gamma_t);
    }
    CHECK(param_digest(ra.final_params) != param_digest(rn.final_params));
}

TEST_CASE("acceptance fraction is monotone in the threshold") {
    Dataset ds = tiny_dataset(16, 13);
    auto mc = tiny_model(ds);
    auto cfg = quick_train(Schedule::aimkp, 9);
    cfg.epochs = 2;
    auto result = run_training(make_train_data(ds), mc, cfg);
    REQUIRE(!result.decisions.empty());
    auto accepted_at = [&result](double tau) {
        int n = 0;
        for (const auto& d : result.decisions)
            if (d.s_t.has_value() && filter_switch(*d.s_t, tau)) ++n;
        return n;
    };
    CHECK(accepted_at(0.1) >= accepted_at(0.5));
}

TEST_CASE("divergence restores the last good parameters") {
    Dataset ds = tiny_dataset(12, 17);
    auto mc = tiny_model(ds);
    TrainConfig cfg = quick_train(Schedule::baseline, 2);
    cfg.epochs = 2;
    cfg.lr = 1e155; // overflows attention scores on the next forward
    auto result = run_training(make_train_data(ds), mc, cfg);
    CHECK(result.diverged);
    for (double v : result.final_params.values) CHECK(std::isfinite(v));
}

TEST_CASE("global stride mode doubles per epoch up to the cap") {
    Dataset ds = tiny_dataset(16, 19);
    auto mc = tiny_model(ds);
    TrainConfig cfg = quick_train(Schedule::no_filter, 4);
    cfg.epochs = 4; // warmup + 3 masked epochs
    cfg.global_stride = true;
    auto result = run_training(make_train_data(ds), mc, cfg);
    // Masked epochs are 1,2,3; visual cap on a 6x6 grid is 4.
    std::map<int, int> max_gamma_v, max_gamma_t;
    for (const auto& d : result.decisions) {
        max_gamma_v[d.epoch] = std::max(max_gamma_v[d.epoch], d.gamma_v);
        max_gamma_t[d.epoch] = std::max(max_gamma_t[d.epoch], d.gamma_t);
    }
    CHECK(max_gamma_v[1] == 2);
    CHECK(max_gamma_v[2] == 4);
    CHECK(max_gamma_v[3] == 4);
    CHECK(max_gamma_t[1] == 2);
    CHECK(max_gamma_t[2] == 4);
    CHECK(max_gamma_t[3] == 8);
}
