// diffueraser command line: video inpainting with a dual-branch denoiser,
// prior injection, and staggered long-sequence scheduling.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "diffueraser/checkpoint.hpp"
#include "diffueraser/metrics.hpp"
#include "diffueraser/pipeline.hpp"
#include "diffueraser/planner.hpp"
#include "diffueraser/training.hpp"
#include "diffueraser/video_io.hpp"

namespace fs = std::filesystem;
using namespace diffueraser;

namespace {

uint64_t apply_seed_env(uint64_t seed) {
    if (const char* env = std::getenv("DIFFUERASER_SEED")) {
        try {
            return std::stoull(env);
        } catch (...) {
            throw ConfigError("DIFFUERASER_SEED is not a valid integer");
        }
    }
    return seed;
}

InferenceConfig read_inference_config(const std::string& path, InferenceConfig cfg) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config: " + path);
    nlohmann::json j = nlohmann::json::parse(f);
    cfg.clip_len = j.value("clip_len", cfg.clip_len);
    cfg.steps = j.value("steps", cfg.steps);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.prior_strength = j.value("prior_strength", cfg.prior_strength);
    cfg.blur_sigma = j.value("blur_sigma", cfg.blur_sigma);
    cfg.guidance_enabled = j.value("guidance_enabled", cfg.guidance_enabled);
    cfg.bypass_diffusion = j.value("bypass_diffusion", cfg.bypass_diffusion);
    cfg.external_prior_cmd = j.value("external_prior", cfg.external_prior_cmd);
    return cfg;
}

int cmd_inpaint(const std::string& frames_dir, const std::string& masks_dir,
                const std::string& out_dir, const std::string& ckpt_path, InferenceConfig cfg,
                const std::string& gt_dir, std::string report_path) {
    if (!fs::exists(ckpt_path)) throw ConfigError("checkpoint not found: " + ckpt_path);
    cfg.seed = apply_seed_env(cfg.seed);
    cfg.validate();
    Model model = load_checkpoint(ckpt_path);
    VideoFrames frames = load_frames(frames_dir);
    MaskSequence masks = load_masks(masks_dir, frames.frames());

    auto start = std::chrono::steady_clock::now();
    InferenceTrace trace;
    VideoFrames out = inpaint_video(frames, masks, model, cfg, &trace, [](int k, int t) {
        std::cerr << "timestep " << k << " (t=" << t << ")\n";
    });
    double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    save_frames(out_dir, out);
    std::cerr << "inpainted " << frames.frames() << " frames in " << seconds << "s\n";

    if (!gt_dir.empty()) {
        VideoFrames gt = load_frames(gt_dir);
        EvalReport report = compute_metrics(out, gt, masks);
        report.runtime_seconds = seconds;
        if (report_path.empty()) report_path = out_dir + "/eval_report.json";
        std::ofstream(report_path) << report.to_json().dump(2) << "\n";
        std::cerr << "psnr_in_mask mean " << report.psnr_mean << " dB, stability "
                  << report.temporal_stability << "\n";
    }
    return 0;
}

int cmd_plan(int64_t n_frames, int clip_len, int steps) {
    TemporalPlan plan = staggered_plan(n_frames, clip_len, steps);
    plan.preinference_indices = sample_preinference_frames(n_frames, clip_len);
    plan = anchor_plan(plan);
    std::cout << plan_to_json(plan).dump(2) << "\n";
    return 0;
}

int cmd_eval(const std::string& out_dir, const std::string& gt_dir, const std::string& masks_dir,
             const std::string& report_path) {
    VideoFrames out = load_frames(out_dir);
    VideoFrames gt = load_frames(gt_dir);
    MaskSequence masks = load_masks(masks_dir, out.frames());
    EvalReport report = compute_metrics(out, gt, masks);
    std::cout << report.to_json().dump(2) << "\n";
    if (!report_path.empty()) std::ofstream(report_path) << report.to_json().dump(2) << "\n";
    return 0;
}

int cmd_make_dataset(const std::string& out_dir, int videos, int frames, int height, int width,
                     uint64_t seed) {
    fs::create_directories(out_dir);
    char name[32];
    for (int i = 0; i < videos; ++i) {
        SyntheticVideoConfig cfg;
        cfg.h = height;
        cfg.w = width;
        cfg.f = frames;
        cfg.seed = seed + static_cast<uint64_t>(i) * 1013;
        VideoFrames v = make_synthetic_video(cfg);
        v.fps = 12.0;
        std::snprintf(name, sizeof(name), "/video_%03d", i);
        save_frames(out_dir + name, v);
    }
    std::cerr << "wrote " << videos << " synthetic videos to " << out_dir << "\n";
    return 0;
}

std::vector<VideoFrames> load_corpus(const std::string& data_dir) {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(data_dir))
        if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    std::vector<VideoFrames> corpus;
    for (const auto& d : dirs) corpus.push_back(load_frames(d.string()));
    if (corpus.empty()) throw ConfigError("no video directories under " + data_dir);
    return corpus;
}

int cmd_train(TrainConfig cfg, const std::string& config_json, const std::string& data_dir,
              int synthetic_videos, const std::string& ckpt_in, const std::string& ckpt_out,
              const std::string& csv_log, int codec_steps, double codec_lr) {
    if (!config_json.empty()) {
        std::ifstream f(config_json);
        if (!f) throw ConfigError("cannot read training config: " + config_json);
        nlohmann::json j = nlohmann::json::parse(f);
        cfg.stage = j.value("stage", cfg.stage);
        cfg.lr = j.value("lr", cfg.lr);
        cfg.batch_size = j.value("batch_size", cfg.batch_size);
        cfg.n_steps = j.value("n_steps", cfg.n_steps);
        cfg.clip_frames = j.value("clip_frames", cfg.clip_frames);
        cfg.seed = j.value("seed", cfg.seed);
    }
    cfg.seed = apply_seed_env(cfg.seed);
    cfg.validate();

    std::vector<VideoFrames> corpus;
    if (!data_dir.empty())
        corpus = load_corpus(data_dir);
    else {
        for (int i = 0; i < synthetic_videos; ++i) {
            SyntheticVideoConfig sc;
            sc.seed = cfg.seed + static_cast<uint64_t>(i) * 917;
            corpus.push_back(make_synthetic_video(sc));
        }
    }
    if (corpus.empty()) throw ConfigError("no training data: pass --data or --synthetic");

    Model model;
    if (!ckpt_in.empty()) {
        if (!fs::exists(ckpt_in)) throw ConfigError("checkpoint not found: " + ckpt_in);
        model = load_checkpoint(ckpt_in);
    } else {
        model = init_model(ArchConfig{}, CodecMode::Toy4, ScheduleConfig{}, cfg.seed);
        std::cerr << "fresh model; pretraining codec for " << codec_steps << " steps\n";
        pretrain_codec(model, corpus, codec_steps, codec_lr, cfg.seed + 71, &std::cerr);
    }

    auto log = run_training(model, corpus, cfg, csv_log);
    if (!log.empty()) {
        size_t k = std::min<size_t>(10, log.size());
        double head = 0, tail = 0;
        for (size_t i = 0; i < k; ++i) {
            head += log[i].loss;
            tail += log[log.size() - 1 - i].loss;
        }
        std::cerr << "stage " << cfg.stage << ": mean loss " << head / k << " -> " << tail / k
                  << " over " << log.size() << " steps\n";
    }
    save_checkpoint(ckpt_out, model);
    std::cerr << "saved " << ckpt_out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"diffueraser: dual-branch diffusion video inpainting"};
    app.require_subcommand(1);

    // inpaint
    auto* inpaint = app.add_subcommand("inpaint", "inpaint a frame directory");
    std::string frames_dir, masks_dir, out_dir, ckpt_path, gt_dir, report_path, icfg_json;
    InferenceConfig icfg;
    inpaint->add_option("--config", icfg_json, "inference config JSON (flags override)");
    inpaint->add_option("--frames", frames_dir, "input frame directory")->required();
    inpaint->add_option("--masks", masks_dir, "mask directory (1 file or per-frame)")->required();
    inpaint->add_option("--out", out_dir, "output frame directory")->required();
    inpaint->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    auto* o_steps = inpaint->add_option("--steps", icfg.steps, "inference steps");
    auto* o_clip = inpaint->add_option("--clip-len", icfg.clip_len, "frames per clip");
    auto* o_seed = inpaint->add_option("--seed", icfg.seed, "noise seed");
    auto* o_strength =
        inpaint->add_option("--prior-strength", icfg.prior_strength, "prior injection strength");
    auto* o_blur = inpaint->add_option("--blur-sigma", icfg.blur_sigma, "mask blur sigma");
    bool no_guidance = false;
    inpaint->add_flag("--no-guidance", no_guidance, "disable pre-inference anchors");
    auto* o_bypass =
        inpaint->add_flag("--bypass-diffusion", icfg.bypass_diffusion, "prior + blend only");
    auto* o_ext = inpaint->add_option("--external-prior", icfg.external_prior_cmd,
                                      "external prior command (reads --frames/--masks/--out)");
    inpaint->add_option("--ground-truth", gt_dir, "ground truth for metrics");
    inpaint->add_option("--report", report_path, "metrics JSON path");

    // train
    auto* train = app.add_subcommand("train", "two-stage training");
    TrainConfig tcfg;
    std::string config_json, data_dir, ckpt_in, ckpt_out = "model.ckpt", csv_log;
    int synthetic_videos = 0, codec_steps = 800;
    double codec_lr = 1e-3;
    train->add_option("--config", config_json, "training config JSON");
    train->add_option("--stage", tcfg.stage, "1 (content) or 2 (motion)");
    train->add_option("--lr", tcfg.lr, "learning rate");
    train->add_option("--batch-size", tcfg.batch_size, "samples per step");
    train->add_option("--steps", tcfg.n_steps, "optimizer steps");
    train->add_option("--clip-frames", tcfg.clip_frames, "stage-2 clip length");
    train->add_option("--seed", tcfg.seed, "training seed");
    train->add_option("--data", data_dir, "corpus directory (from make-dataset)");
    train->add_option("--synthetic", synthetic_videos, "generate N in-memory videos instead");
    train->add_option("--checkpoint-in", ckpt_in, "resume from checkpoint");
    train->add_option("--checkpoint-out", ckpt_out, "output checkpoint");
    train->add_option("--log", csv_log, "CSV log (step,loss,lr)");
    train->add_option("--codec-steps", codec_steps, "codec pretrain steps for fresh models");
    train->add_option("--codec-lr", codec_lr, "codec pretrain learning rate");

    // plan
    auto* plan = app.add_subcommand("plan", "dump the temporal plan as JSON");
    int64_t plan_frames = 0;
    int plan_clip = 22, plan_steps = 50;
    plan->add_option("--frames", plan_frames, "number of frames")->required();
    plan->add_option("--clip-len", plan_clip, "frames per clip");
    plan->add_option("--steps", plan_steps, "inference steps");

    // eval
    auto* eval = app.add_subcommand("eval", "metrics for an inpainted result");
    std::string eval_out, eval_gt, eval_masks, eval_report;
    eval->add_option("--output", eval_out, "inpainted frame directory")->required();
    eval->add_option("--ground-truth", eval_gt, "ground truth frames")->required();
    eval->add_option("--masks", eval_masks, "mask directory")->required();
    eval->add_option("--report", eval_report, "write JSON here too");

    // make-dataset
    auto* mkds = app.add_subcommand("make-dataset", "write a synthetic training corpus");
    std::string ds_out;
    int ds_videos = 16, ds_frames = 8, ds_h = 32, ds_w = 32;
    uint64_t ds_seed = 0;
    mkds->add_option("--out", ds_out, "output directory")->required();
    mkds->add_option("--videos", ds_videos, "number of videos");
    mkds->add_option("--frames", ds_frames, "frames per video");
    mkds->add_option("--height", ds_h, "frame height");
    mkds->add_option("--width", ds_w, "frame width");
    mkds->add_option("--seed", ds_seed, "generator seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*inpaint) {
            if (!icfg_json.empty()) {
                InferenceConfig base = read_inference_config(icfg_json, InferenceConfig{});
                if (!o_steps->count()) icfg.steps = base.steps;
                if (!o_clip->count()) icfg.clip_len = base.clip_len;
                if (!o_seed->count()) icfg.seed = base.seed;
                if (!o_strength->count()) icfg.prior_strength = base.prior_strength;
                if (!o_blur->count()) icfg.blur_sigma = base.blur_sigma;
                if (!o_bypass->count()) icfg.bypass_diffusion = base.bypass_diffusion;
                if (!o_ext->count()) icfg.external_prior_cmd = base.external_prior_cmd;
                if (!no_guidance) icfg.guidance_enabled = base.guidance_enabled;
            }
            if (no_guidance) icfg.guidance_enabled = false;
            return cmd_inpaint(frames_dir, masks_dir, out_dir, ckpt_path, icfg, gt_dir,
                               report_path);
        }
        if (*train)
            return cmd_train(tcfg, config_json, data_dir, synthetic_videos, ckpt_in, ckpt_out,
                             csv_log, codec_steps, codec_lr);
        if (*plan) return cmd_plan(plan_frames, plan_clip, plan_steps);
        if (*eval) return cmd_eval(eval_out, eval_gt, eval_masks, eval_report);
        if (*mkds) return cmd_make_dataset(ds_out, ds_videos, ds_frames, ds_h, ds_w, ds_seed);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
