// ltpretrain: long-tailed detection pre-training CLI.
//
// Subcommands: gen-data, schedule, pretrain, preview-views, probe,
// analyze-errors, report-norms. See README.md for format details.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "ltp/eval.hpp"
#include "ltp/image_io.hpp"
#include "ltp/sampler.hpp"
#include "ltp/train.hpp"

using namespace ltp;
namespace fs = std::filesystem;

namespace {

ManifestFormat format_for(const std::string& path, const std::string& flag) {
    if (flag == "coco-json") return ManifestFormat::CocoJson;
    if (flag == "internal") return ManifestFormat::Internal;
    if (!flag.empty()) throw ConfigError("unknown manifest format '" + flag + "'");
    if (path.size() > 6 && path.substr(path.size() - 6) == ".jsonl") return ManifestFormat::Internal;
    return ManifestFormat::CocoJson;
}

DatasetManifest load_any(const std::string& path, const std::string& flag) {
    return load_manifest(path, format_for(path, flag)).manifest;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f << text;
}

ProposalSource parse_source_flag(const std::string& v) {
    if (v == "ground-truth") return ProposalSource::GroundTruth;
    if (v == "jittered-gt") return ProposalSource::JitteredGt;
    if (v == "random-boxes") return ProposalSource::RandomBoxes;
    throw ConfigError("unknown proposal source '" + v + "'");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"2DRCL-style pre-training for long-tailed detection"};
    app.require_subcommand(1);

    // --- gen-data ---
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic long-tailed manifest");
    SyntheticConfig gen_cfg;
    std::string gen_out;
    gen->add_option("--out", gen_out, "output manifest path (.jsonl)")->required();
    gen->add_option("--num-images", gen_cfg.num_images, "image count");
    gen->add_option("--classes", gen_cfg.num_classes, "class count");
    gen->add_option("--zipf", gen_cfg.zipf_exponent, "zipf exponent s");
    gen->add_option("--image-size", gen_cfg.image_size, "square image size");
    gen->add_option("--seed", gen_cfg.seed, "generator seed");

    // --- schedule ---
    auto* sched = app.add_subcommand("schedule", "emit the repeat-factor table and epoch schedule");
    std::string sched_manifest, sched_format, table_out, schedule_out;
    int sched_epoch = 1;
    ScheduleConfig sched_cfg;
    sched->add_option("--manifest", sched_manifest, "dataset manifest")->required();
    sched->add_option("--format", sched_format, "manifest format: coco-json | internal");
    sched->add_option("--epoch", sched_epoch, "epoch T (1-indexed)")->required();
    sched->add_option("--t-max", sched_cfg.t_max, "total epochs T_max")->required();
    sched->add_option("--t-threshold", sched_cfg.t_threshold, "repeat-factor threshold t");
    sched->add_option("--seed", sched_cfg.seed, "schedule seed");
    sched->add_option("--table-out", table_out, "write the CSV table here instead of stdout");
    sched->add_option("--schedule-out", schedule_out, "write the id list here instead of stdout");

    // --- pretrain ---
    auto* pre = app.add_subcommand("pretrain", "run pre-training");
    std::string pre_config, pre_manifest, pre_format, pre_out, pre_resume;
    bool pre_deterministic = false;
    uint64_t pre_seed = 0;
    bool pre_seed_set = false;
    pre->add_option("--config", pre_config, "flat key=value config file");
    pre->add_option("--manifest", pre_manifest, "dataset manifest")->required();
    pre->add_option("--format", pre_format, "manifest format: coco-json | internal");
    pre->add_option("--out", pre_out, "run directory")->required();
    pre->add_flag("--deterministic", pre_deterministic, "force single-threaded deterministic mode");
    pre->add_option_function<uint64_t>(
        "--seed", [&](const uint64_t& v) { pre_seed = v; pre_seed_set = true; }, "override config seed");
    pre->add_option("--resume", pre_resume, "checkpoint directory to continue from");

    // --- preview-views ---
    auto* prev = app.add_subcommand("preview-views", "write augmented views with proposal overlays");
    std::string prev_manifest, prev_format, prev_out, prev_source = "ground-truth";
    int64_t prev_image = 0;
    uint64_t prev_seed = 0;
    int prev_size = 64;
    prev->add_option("--manifest", prev_manifest, "dataset manifest")->required();
    prev->add_option("--format", prev_format, "manifest format: coco-json | internal");
    prev->add_option("--image-id", prev_image, "image to preview")->required();
    prev->add_option("--seed", prev_seed, "augmentation seed");
    prev->add_option("--out", prev_out, "output directory")->required();
    prev->add_option("--source", prev_source, "ground-truth | jittered-gt | random-boxes");
    prev->add_option("--size", prev_size, "view output size");

    // --- probe ---
    auto* probe = app.add_subcommand("probe", "frozen-feature classification probe");
    std::string probe_ckpt, probe_manifest, probe_format, probe_out;
    ProbeConfig probe_cfg;
    probe->add_option("--ckpt", probe_ckpt, "training checkpoint directory")->required();
    probe->add_option("--manifest", probe_manifest, "dataset manifest")->required();
    probe->add_option("--format", probe_format, "manifest format");
    probe->add_option("--out", probe_out, "output directory")->required();
    probe->add_option("--seed", probe_cfg.seed, "probe seed");
    probe->add_option("--epochs", probe_cfg.epochs, "probe epochs");
    probe->add_option("--rare-max", probe_cfg.cuts.rare_max, "rare group cut (instances)");
    probe->add_option("--stage", probe_cfg.stage_index, "encoder stage to probe (-1 = RoI stage)");
    probe->add_option("--pooled-size", probe_cfg.pooled_size, "RoI bins per side (-1 = model default)");
    probe->add_flag("--projected", probe_cfg.use_projected, "probe the proposal-projection embeddings");
    probe->add_option("--common-max", probe_cfg.cuts.common_max, "common group cut (instances)");

    // --- analyze-errors ---
    auto* err = app.add_subcommand("analyze-errors", "five-way detection error breakdown");
    std::string err_pred, err_gt, err_format, err_out;
    int err_topn = 100;
    GroupCuts err_cuts;
    err->add_option("--pred", err_pred, "predictions JSONL")->required();
    err->add_option("--gt", err_gt, "ground-truth manifest")->required();
    err->add_option("--format", err_format, "manifest format");
    err->add_option("--out", err_out, "breakdown JSON path")->required();
    err->add_option("--top-n", err_topn, "top predictions kept per class");
    err->add_option("--rare-max", err_cuts.rare_max, "rare group cut");
    err->add_option("--common-max", err_cuts.common_max, "common group cut");

    // --- report-norms ---
    auto* norms = app.add_subcommand("report-norms", "classifier weight-norm report");
    std::string norms_ckpt, norms_out;
    GroupCuts norms_cuts;
    norms->add_option("--ckpt", norms_ckpt, "probe output directory (from `probe`)")->required();
    norms->add_option("--out", norms_out, "CSV path")->required();
    norms->add_option("--rare-max", norms_cuts.rare_max, "rare group cut");
    norms->add_option("--common-max", norms_cuts.common_max, "common group cut");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            DatasetManifest m = generate_synthetic(gen_cfg);
            save_manifest(m, gen_out);
            std::printf("wrote %zu images, %d classes to %s\n", m.images.size(), m.num_classes,
                        gen_out.c_str());
        } else if (*sched) {
            DatasetManifest m = load_any(sched_manifest, sched_format);
            ClassStats stats = compute_class_stats(m);
            RepeatFactorTable table = build_table(stats, sched_epoch, sched_cfg);
            EpochSchedule es = build_epoch_schedule(m, table, sched_cfg.seed);
            std::string csv = table_to_csv(table, stats);
            std::string ids;
            for (int64_t id : es.image_ids) ids += std::to_string(id) + "\n";
            if (table_out.empty()) std::fputs(csv.c_str(), stdout);
            else write_text(table_out, csv);
            if (schedule_out.empty()) {
                std::fputs("# schedule\n", stdout);
                std::fputs(ids.c_str(), stdout);
            } else {
                write_text(schedule_out, ids);
            }
        } else if (*pre) {
            DatasetManifest m = load_any(pre_manifest, pre_format);
            TrainResult res;
            if (!pre_resume.empty()) {
                res = resume(pre_resume, m, pre_out);
            } else {
                TrainConfig cfg = pre_config.empty() ? TrainConfig{} : load_train_config(pre_config);
                if (pre_seed_set) cfg.seed = pre_seed;
                if (pre_deterministic) cfg.deterministic = true;
                res = train(cfg, m, pre_out);
            }
            std::printf("trained %lld steps (%d epochs), %lld skipped images\n",
                        static_cast<long long>(res.steps), res.epochs_run,
                        static_cast<long long>(res.skipped_images));
            std::printf("metrics: %s\ncheckpoint: %s\n", res.metrics_path.c_str(),
                        res.checkpoint_dir.c_str());
        } else if (*prev) {
            DatasetManifest m = load_any(prev_manifest, prev_format);
            const ImageRecord* im = nullptr;
            for (const ImageRecord& r : m.images)
                if (r.image_id == prev_image) im = &r;
            if (!im) throw ValidationError("image id " + std::to_string(prev_image) + " not found");
            ViewConfig vcfg;
            vcfg.output_size = prev_size;
            ViewPair pair = make_view_pair(*im, parse_source_flag(prev_source), prev_seed, vcfg);
            std::error_code ec;
            fs::create_directories(prev_out, ec);
            const std::array<std::array<double, 3>, 8> palette = {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1},
                                                                   {1, 1, 0}, {1, 0, 1}, {0, 1, 1},
                                                                   {1, 0.5, 0}, {0.5, 0, 1}}};
            Tensor q = pair.view_q.pixels, k = pair.view_k.pixels;
            for (size_t i = 0; i < pair.proposals.size(); ++i) {
                draw_box_outline(q, pair.proposals[i].box_in_q, palette[i % palette.size()]);
                draw_box_outline(k, pair.proposals[i].box_in_k, palette[i % palette.size()]);
            }
            write_png(prev_out + "/view_q.png", q);
            write_png(prev_out + "/view_k.png", k);
            std::printf("wrote %s/view_q.png and view_k.png with %zu proposals\n", prev_out.c_str(),
                        pair.proposals.size());
        } else if (*probe) {
            DatasetManifest m = load_any(probe_manifest, probe_format);
            Model model = load_model(probe_ckpt);
            ProbeReport rep = probe_eval(model, m, probe_cfg);
            std::error_code ec;
            fs::create_directories(probe_out, ec);

            nlohmann::json pj;
            pj["overall"] = rep.overall;
            if (rep.rare) pj["rare"] = *rep.rare;
            if (rep.common) pj["common"] = *rep.common;
            if (rep.frequent) pj["frequent"] = *rep.frequent;
            pj["train_boxes"] = rep.train_boxes;
            pj["eval_boxes"] = rep.eval_boxes;
            pj["per_class_accuracy"] = rep.per_class_accuracy;
            pj["train_instances"] = rep.train_instances;
            write_text(probe_out + "/probe.json", pj.dump(2) + "\n");

            CheckpointData cls;
            cls.tensors.emplace_back("classifier.w", rep.classifier_weights);
            Tensor counts({static_cast<int>(rep.train_instances.size())});
            for (size_t i = 0; i < rep.train_instances.size(); ++i)
                counts[static_cast<int64_t>(i)] = static_cast<double>(rep.train_instances[i]);
            cls.tensors.emplace_back("train_instances", counts);
            write_checkpoint(probe_out + "/classifier", cls);
            std::printf("probe overall accuracy %.4f (%s)\n", rep.overall,
                        (probe_out + "/probe.json").c_str());
        } else if (*err) {
            DatasetManifest m = load_any(err_gt, err_format);
            std::vector<Prediction> preds = load_predictions(err_pred);
            ErrorBreakdown b = analyze_errors(preds, m, err_cuts, err_topn);
            write_text(err_out, breakdown_to_json(b) + "\n");
            std::printf("categorized %lld predictions -> %s\n", static_cast<long long>(b.classified),
                        err_out.c_str());
        } else if (*norms) {
            CheckpointData cls = read_checkpoint(norms_ckpt + "/classifier");
            const Tensor* w = nullptr;
            const Tensor* counts = nullptr;
            for (const auto& [name, t] : cls.tensors) {
                if (name == "classifier.w") w = &t;
                if (name == "train_instances") counts = &t;
            }
            if (!w || !counts) throw CheckpointError("probe classifier checkpoint is incomplete");
            std::vector<int64_t> instances(static_cast<size_t>(counts->numel()));
            for (int64_t i = 0; i < counts->numel(); ++i)
                instances[static_cast<size_t>(i)] = static_cast<int64_t>((*counts)[i]);
            WeightNormReport rep = weight_norm_report(*w, instances, norms_cuts);
            write_text(norms_out, weight_norms_to_csv(rep, instances));
            std::printf("wrote %s\n", norms_out.c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
