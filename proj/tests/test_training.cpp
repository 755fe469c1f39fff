#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>

#include "diffueraser/training.hpp"
#include "helpers.hpp"

using namespace diffueraser;
using testutil::spearman_rho;

namespace {

ArchConfig mini_arch() {
    ArchConfig a;
    a.base_width = 8;
    a.gn_groups = 4;
    a.temb_dim = 16;
    a.temb_hidden = 32;
    a.context_dim = 8;
    return a;
}

Model mini_model(uint64_t seed) {
    Model m = init_model(mini_arch(), CodecMode::Toy4, ScheduleConfig{}, seed);
    m.codec.params = init_codec(16, seed + 1);
    return m;
}

std::map<std::string, Tensor> snapshot(Model& m, bool motion_only, bool invert) {
    std::map<std::string, Tensor> snap;
    auto take = [&](Param& p, ParamGroup g) {
        bool is_motion = g == ParamGroup::Motion;
        if (invert ? !is_motion : is_motion) {
            if (motion_only || invert) snap[p.name] = p.value;
        }
    };
    m.net.visit(take);
    if (invert) m.codec.params.visit(take);
    return snap;
}

}  // namespace

TEST_CASE("generate_mask_sequence: degenerate rates") {
    MaskGenConfig cfg;
    cfg.rate = 0.0;
    MaskSequence zero = generate_mask_sequence(32, 32, 4, cfg);
    CHECK(max_abs(zero.data) == 0.0);
    cfg.rate = 1.0;
    MaskSequence ones = generate_mask_sequence(32, 32, 4, cfg);
    for (int64_t f = 0; f < 4; ++f) CHECK(ones.coverage(f) == 1.0);
    cfg.rate = 1.5;
    CHECK_THROWS_AS(generate_mask_sequence(32, 32, 4, cfg), std::invalid_argument);
}

TEST_CASE("generate_mask_sequence: deterministic per seed, binary values") {
    for (auto shape : {MaskGenConfig::Shape::Rectangle, MaskGenConfig::Shape::Ellipse,
                       MaskGenConfig::Shape::Stroke}) {
        MaskGenConfig cfg;
        cfg.rate = 0.3;
        cfg.direction_deg = 135.0;
        cfg.shape = shape;
        cfg.seed = 99;
        MaskSequence a = generate_mask_sequence(32, 32, 6, cfg);
        MaskSequence b = generate_mask_sequence(32, 32, 6, cfg);
        CHECK(bitwise_equal(a.data, b.data));
        for (int64_t i = 0; i < a.data.numel(); ++i)
            REQUIRE((a.data[i] == 0.0 || a.data[i] == 1.0));
    }
}

TEST_CASE("generate_mask_sequence: Monte Carlo coverage near the requested rate") {
    Rng rng(1);
    double total = 0.0;
    int count = 0;
    for (int seed = 0; seed < 300; ++seed) {
        MaskGenConfig cfg;
        cfg.rate = 0.3;
        cfg.direction_deg = rng.uniform(0.0, 360.0);
        cfg.shape = static_cast<MaskGenConfig::Shape>(seed % 3);
        cfg.seed = static_cast<uint64_t>(seed) * 7 + 1;
        MaskSequence m = generate_mask_sequence(32, 32, 4, cfg);
        for (int64_t f = 0; f < 4; ++f) {
            total += m.coverage(f);
            ++count;
        }
    }
    double mean = total / count;
    CHECK(mean >= 0.2);
    CHECK(mean <= 0.4);
}

TEST_CASE("generate_mask_sequence: coverage is monotone in rate") {
    std::vector<double> rates, coverages;
    for (int i = 1; i <= 9; ++i) {
        double rate = i / 10.0;
        double cov = 0.0;
        int count = 0;
        for (int seed = 0; seed < 40; ++seed) {
            MaskGenConfig cfg;
            cfg.rate = rate;
            cfg.shape = static_cast<MaskGenConfig::Shape>(seed % 3);
            cfg.seed = static_cast<uint64_t>(seed) * 13 + 5;
            MaskSequence m = generate_mask_sequence(24, 24, 2, cfg);
            cov += (m.coverage(0) + m.coverage(1)) / 2.0;
            ++count;
        }
        rates.push_back(rate);
        coverages.push_back(cov / count);
    }
    CHECK(spearman_rho(rates, coverages) > 0.9);
}

TEST_CASE("synthetic corpus: deterministic, in range, genuinely moving") {
    SyntheticVideoConfig cfg;
    cfg.seed = 5;
    VideoFrames a = make_synthetic_video(cfg);
    VideoFrames b = make_synthetic_video(cfg);
    CHECK(bitwise_equal(a.data, b.data));
    for (int64_t i = 0; i < a.data.numel(); ++i) {
        REQUIRE(a.data[i] >= 0.0);
        REQUIRE(a.data[i] <= 1.0);
    }
    Tensor f0({3 * 32 * 32}), f1({3 * 32 * 32});
    std::memcpy(f0.ptr(), a.data.ptr(), f0.numel() * sizeof(double));
    std::memcpy(f1.ptr(), a.data.ptr() + f0.numel(), f1.numel() * sizeof(double));
    CHECK(max_abs_diff(f0, f1) > 1e-4);
}

TEST_CASE("make_training_batch: shapes, determinism, and the t=0 limit") {
    Model model = mini_model(2);
    NoiseSchedule schedule = model.sched.make();
    VideoFrames v = make_synthetic_video({});
    MaskGenConfig mg;
    mg.rate = 0.25;
    mg.seed = 3;
    MaskSequence m = generate_mask_sequence(32, 32, 8, mg);

    Rng rng_a(7), rng_b(7);
    TrainSample a = make_training_batch(v.data, m, model, schedule, rng_a);
    TrainSample b = make_training_batch(v.data, m, model, schedule, rng_b);
    CHECK(a.t == b.t);
    CHECK(bitwise_equal(a.noisy, b.noisy));
    CHECK(bitwise_equal(a.cond, b.cond));
    CHECK(bitwise_equal(a.target, b.target));

    CHECK(a.noisy.shape == std::vector<int64_t>{8, 4, 8, 8});
    CHECK(a.cond.shape == std::vector<int64_t>{8, 9, 8, 8});
    CHECK(a.target.shape == std::vector<int64_t>{8, 4, 8, 8});

    Rng rng_c(9);
    TrainSample t0 = make_training_batch(v.data, m, model, schedule, rng_c, /*force_t=*/0);
    Tensor clean = model.codec.encode(v.data).data;
    CHECK(t0.t == 0);
    CHECK(max_abs_diff(t0.noisy, clean) <= 2e-2 * (1.0 + max_abs(t0.target)));
}

TEST_CASE("train_step: a stage-2 step leaves every non-motion parameter bitwise unchanged") {
    Model model = mini_model(4);
    NoiseSchedule schedule = model.sched.make();
    VideoFrames v = make_synthetic_video({});
    MaskGenConfig mg;
    mg.rate = 0.3;
    mg.seed = 11;
    MaskSequence m = generate_mask_sequence(32, 32, 8, mg);
    Rng rng(13);
    std::vector<TrainSample> batch{make_training_batch(v.data, m, model, schedule, rng)};

    // one stage-1 step first: it moves the zero-initialized output conv off
    // zero so gradients reach the motion module, as in the real procedure
    Adam warm;
    warm.lr = 1e-3;
    train_step(model, batch, warm, /*stage=*/1);

    std::map<std::string, Tensor> before = snapshot(model, false, /*invert=*/true);
    Adam opt;
    opt.lr = 1e-3;
    double loss = train_step(model, batch, opt, /*stage=*/2);
    CHECK(std::isfinite(loss));
    std::map<std::string, Tensor> after = snapshot(model, false, /*invert=*/true);
    REQUIRE(before.size() == after.size());
    for (auto& [name, val] : before) REQUIRE(bitwise_equal(val, after.at(name)));

    // and the motion parameters did move
    bool moved = false;
    model.net.visit([&](Param& p, ParamGroup g) {
        if (g == ParamGroup::Motion && p.grad.same_shape(p.value) && max_abs(p.grad) > 0.0)
            moved = true;
    });
    CHECK(moved);
}

TEST_CASE("train_step: stage-1 step leaves motion parameters bitwise unchanged") {
    Model model = mini_model(5);
    NoiseSchedule schedule = model.sched.make();
    VideoFrames v = make_synthetic_video({});
    MaskGenConfig mg;
    mg.rate = 0.2;
    mg.seed = 12;
    MaskSequence m = generate_mask_sequence(32, 32, 8, mg);
    Rng rng(17);
    std::vector<TrainSample> batch{make_training_batch(v.data, m, model, schedule, rng)};

    std::map<std::string, Tensor> motion_before = snapshot(model, true, /*invert=*/false);
    Adam opt;
    opt.lr = 1e-3;
    train_step(model, batch, opt, /*stage=*/1);
    std::map<std::string, Tensor> motion_after = snapshot(model, true, /*invert=*/false);
    for (auto& [name, val] : motion_before) REQUIRE(bitwise_equal(val, motion_after.at(name)));
}

TEST_CASE("train_step: loss is zero when the target equals the model's own prediction") {
    Model model = mini_model(6);
    NoiseSchedule schedule = model.sched.make();
    VideoFrames v = make_synthetic_video({});
    MaskSequence m = generate_mask_sequence(32, 32, 8, {});
    Rng rng(19);
    TrainSample s = make_training_batch(v.data, m, model, schedule, rng);
    s.target = predict_epsilon(s.noisy, s.cond, s.t, model.sched.make().abar(s.t), model.net);
    Adam opt;
    double loss = train_step(model, {s}, opt, 1);
    CHECK(loss == 0.0);
}

TEST_CASE("train_step: deterministic loss, non-finite loss aborts") {
    Model model = mini_model(7);
    NoiseSchedule schedule = model.sched.make();
    VideoFrames v = make_synthetic_video({});
    MaskSequence m = generate_mask_sequence(32, 32, 8, {});
    Rng rng(23);
    std::vector<TrainSample> batch{make_training_batch(v.data, m, model, schedule, rng)};
    Model copy = model;
    Adam o1, o2;
    double l1 = train_step(model, batch, o1, 1);
    double l2 = train_step(copy, batch, o2, 1);
    CHECK(l1 == l2);

    model.net.conv_in.w.value[0] = std::nan("");
    Adam o3;
    CHECK_THROWS_WITH_AS(train_step(model, batch, o3, 1), doctest::Contains("non-finite"),
                         std::runtime_error);
}

TEST_CASE("codec pretraining reduces reconstruction error") {
    Model model = mini_model(8);
    std::vector<VideoFrames> corpus;
    for (int i = 0; i < 4; ++i) {
        SyntheticVideoConfig sc;
        sc.seed = 100 + static_cast<uint64_t>(i);
        sc.f = 4;
        corpus.push_back(make_synthetic_video(sc));
    }
    auto recon_mse = [&] {
        double acc = 0.0;
        for (const auto& v : corpus) {
            Tensor rec = model.codec.decode(model.codec.encode(v.data));
            acc += mean_sq(sub(rec, v.data));
        }
        return acc / static_cast<double>(corpus.size());
    };
    double before = recon_mse();
    pretrain_codec(model, corpus, 150, 2e-3, 9);
    double after = recon_mse();
    CHECK(after < 0.25 * before);
}

TEST_CASE("toy overfit: loss drops substantially within a short budget") {
    Model model = mini_model(9);
    SyntheticVideoConfig sc;
    sc.seed = 42;
    sc.f = 8;
    std::vector<VideoFrames> corpus{make_synthetic_video(sc)};
    pretrain_codec(model, corpus, 60, 2e-3, 10);

    TrainConfig cfg;
    cfg.stage = 1;
    cfg.lr = 6e-3;
    cfg.batch_size = 2;
    cfg.n_steps = 100;
    cfg.seed = 11;
    auto log1 = run_training(model, corpus, cfg);
    cfg.stage = 2;
    cfg.n_steps = 60;
    cfg.clip_frames = 8;
    auto log2 = run_training(model, corpus, cfg);

    double initial = log1.front().loss;
    double final_loss = 0.0;
    for (size_t i = log2.size() - 5; i < log2.size(); ++i) final_loss += log2[i].loss;
    final_loss /= 5.0;
    CHECK(final_loss < 0.6 * initial);
}

TEST_CASE("run_training writes the CSV log") {
    testutil::TempDir dir("trainlog");
    Model model = mini_model(10);
    std::vector<VideoFrames> corpus{make_synthetic_video({})};
    TrainConfig cfg;
    cfg.n_steps = 3;
    cfg.batch_size = 1;
    cfg.lr = 1e-4;
    run_training(model, corpus, cfg, dir.sub("log.csv"));
    std::ifstream f(dir.sub("log.csv"));
    std::string header;
    std::getline(f, header);
    CHECK(header == "step,loss,lr");
    int rows = 0;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 3);
}
