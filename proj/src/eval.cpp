#include "ltp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "ltp/nn.hpp"

namespace ltp {

using nlohmann::json;

ErrorCategory categorize(const Prediction& pred, const std::vector<Annotation>& gt) {
    if (gt.empty()) return ErrorCategory::BackgroundError;
    double best_iou = -1.0;
    size_t best = 0;
    for (size_t i = 0; i < gt.size(); ++i) {
        double v = iou(pred.box, gt[i].box);
        if (v > best_iou) {  // strict: ties keep the lowest index
            best_iou = v;
            best = i;
        }
    }
    bool class_match = pred.class_id == gt[best].category_id;
    if (best_iou >= 0.5) return class_match ? ErrorCategory::Correct : ErrorCategory::ClassificationError;
    if (best_iou >= 0.1) return class_match ? ErrorCategory::LocationError : ErrorCategory::Other;
    return ErrorCategory::BackgroundError;
}

FrequencyGroup frequency_group(int64_t instances, const GroupCuts& cuts) {
    if (instances <= cuts.rare_max) return FrequencyGroup::Rare;
    if (instances <= cuts.common_max) return FrequencyGroup::Common;
    return FrequencyGroup::Frequent;
}

ErrorBreakdown analyze_errors(const std::vector<Prediction>& preds, const DatasetManifest& gt,
                              const GroupCuts& cuts, int top_n) {
    std::map<int64_t, const ImageRecord*> by_id;
    for (const ImageRecord& im : gt.images) by_id[im.image_id] = &im;
    ClassStats stats = compute_class_stats(gt);

    std::map<int, std::vector<const Prediction*>> per_class;
    for (const Prediction& p : preds) {
        if (p.class_id < 0 || p.class_id >= gt.num_classes)
            throw ValidationError("prediction class " + std::to_string(p.class_id) + " out of range");
        per_class[p.class_id].push_back(&p);
    }

    ErrorBreakdown out;
    for (auto& [cls, list] : per_class) {
        std::stable_sort(list.begin(), list.end(),
                         [](const Prediction* a, const Prediction* b) { return a->score > b->score; });
        if (static_cast<int>(list.size()) > top_n) list.resize(static_cast<size_t>(top_n));
        size_t group = static_cast<size_t>(
            frequency_group(stats.instances[static_cast<size_t>(cls)], cuts));
        for (const Prediction* p : list) {
            auto it = by_id.find(p->image_id);
            if (it == by_id.end())
                throw ValidationError("prediction references unknown image " + std::to_string(p->image_id));
            ErrorCategory cat = categorize(*p, it->second->annotations);
            ++out.counts[group][static_cast<size_t>(cat)];
            ++out.classified;
        }
    }
    return out;
}

std::vector<Prediction> load_predictions(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open predictions file " + path);
    std::vector<Prediction> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::parse_error& e) {
            throw FormatError("predictions line " + std::to_string(lineno) + ": " + e.what());
        }
        Prediction p;
        p.image_id = rec.at("image_id").get<int64_t>();
        const auto& b = rec.at("box");
        p.box = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
        p.class_id = rec.at("class_id").get<int>();
        p.score = rec.at("score").get<double>();
        if (!std::isfinite(p.score)) throw ValidationError("non-finite score on line " + std::to_string(lineno));
        out.push_back(p);
    }
    return out;
}

void save_predictions(const std::vector<Prediction>& preds, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write predictions file " + path);
    for (const Prediction& p : preds) {
        json rec;
        rec["image_id"] = p.image_id;
        rec["box"] = {p.box.x0, p.box.y0, p.box.x1, p.box.y1};
        rec["class_id"] = p.class_id;
        rec["score"] = p.score;
        f << rec.dump() << "\n";
    }
}

std::string breakdown_to_json(const ErrorBreakdown& b) {
    json out;
    for (size_t g = 0; g < 3; ++g) {
        json group;
        int64_t group_total = 0;
        for (size_t c = 0; c < 5; ++c) {
            group[kErrorCategoryNames[c]] = b.counts[g][c];
            group_total += b.counts[g][c];
        }
        group["total"] = group_total;
        out[kGroupNames[g]] = std::move(group);
    }
    out["classified"] = b.classified;
    return out.dump(2);
}

// ---- probe ----

ProbeReport linear_probe(const Tensor& features, const std::vector<int>& labels, int num_classes,
                         const std::vector<bool>& in_train, const std::vector<int64_t>& train_instances,
                         const ProbeConfig& cfg) {
    int n = features.size(0), d = features.size(1);
    if (static_cast<int>(labels.size()) != n || static_cast<int>(in_train.size()) != n)
        throw ContractError("probe: feature/label/split sizes disagree");

    std::vector<int> train_idx, eval_idx;
    for (int i = 0; i < n; ++i) (in_train[static_cast<size_t>(i)] ? train_idx : eval_idx).push_back(i);
    if (train_idx.empty() || eval_idx.empty())
        throw ContractError("probe: empty train or eval split");

    Parameter w("probe.w", Tensor({num_classes, d}));
    Parameter b("probe.b", Tensor({1, num_classes}));
    std::vector<Parameter*> params{&w, &b};
    SgdOptimizer opt;
    opt.momentum = cfg.momentum;

    Rng rng(cfg.seed);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(train_idx);
        for (size_t at = 0; at < train_idx.size(); at += static_cast<size_t>(cfg.batch_size)) {
            size_t end = std::min(train_idx.size(), at + static_cast<size_t>(cfg.batch_size));
            int bs = static_cast<int>(end - at);
            Tensor batch({bs, d});
            std::vector<int> batch_labels(static_cast<size_t>(bs));
            for (int r = 0; r < bs; ++r) {
                int src = train_idx[at + static_cast<size_t>(r)];
                for (int j = 0; j < d; ++j)
                    batch[static_cast<int64_t>(r) * d + j] = features[static_cast<int64_t>(src) * d + j];
                batch_labels[static_cast<size_t>(r)] = labels[static_cast<size_t>(src)];
            }
            Tape tape;
            Var logits = linear(tape.constant(std::move(batch)), tape.param(w), tape.param(b));
            Var loss = softmax_ce_mean(logits, batch_labels);
            tape.backward(loss);
            tape.export_grads();
            opt.step(params, cfg.lr);
            SgdOptimizer::zero_grad(params);
        }
    }

    ProbeReport rep;
    rep.train_instances = train_instances;
    rep.classifier_weights = w.value;
    rep.train_boxes = static_cast<int64_t>(train_idx.size());
    rep.eval_boxes = static_cast<int64_t>(eval_idx.size());

    std::vector<int64_t> correct(static_cast<size_t>(num_classes), 0);
    std::vector<int64_t> total(static_cast<size_t>(num_classes), 0);
    int64_t micro_correct = 0;
    for (int i : eval_idx) {
        int best = 0;
        double best_v = -1e300;
        for (int c = 0; c < num_classes; ++c) {
            double v = b.value[c];
            for (int j = 0; j < d; ++j)
                v += w.value[static_cast<int64_t>(c) * d + j] * features[static_cast<int64_t>(i) * d + j];
            if (v > best_v) {
                best_v = v;
                best = c;
            }
        }
        int want = labels[static_cast<size_t>(i)];
        ++total[static_cast<size_t>(want)];
        if (best == want) {
            ++correct[static_cast<size_t>(want)];
            ++micro_correct;
        }
    }
    rep.overall = static_cast<double>(micro_correct) / static_cast<double>(eval_idx.size());
    rep.per_class_accuracy.assign(static_cast<size_t>(num_classes), -1.0);
    std::array<double, 3> group_sum{};
    std::array<int, 3> group_n{};
    for (int c = 0; c < num_classes; ++c) {
        if (total[static_cast<size_t>(c)] == 0) continue;
        double acc = static_cast<double>(correct[static_cast<size_t>(c)]) /
                     static_cast<double>(total[static_cast<size_t>(c)]);
        rep.per_class_accuracy[static_cast<size_t>(c)] = acc;
        size_t g = static_cast<size_t>(frequency_group(train_instances[static_cast<size_t>(c)], cfg.cuts));
        group_sum[g] += acc;
        ++group_n[g];
    }
    auto group_val = [&](FrequencyGroup g) -> std::optional<double> {
        size_t i = static_cast<size_t>(g);
        if (group_n[i] == 0) return std::nullopt;
        return group_sum[i] / group_n[i];
    };
    rep.rare = group_val(FrequencyGroup::Rare);
    rep.common = group_val(FrequencyGroup::Common);
    rep.frequent = group_val(FrequencyGroup::Frequent);
    return rep;
}

ProbeReport probe_eval(Model& model, const DatasetManifest& manifest, const ProbeConfig& cfg) {
    manifest.validate();
    if (manifest.images.empty()) throw DomainError("probe over an empty manifest");
    int size = model.cfg.input_size;

    // deterministic split by image
    std::vector<size_t> order(manifest.images.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, {0x9b0e}));
    rng.shuffle(order);
    size_t n_train = std::max<size_t>(1, static_cast<size_t>(cfg.train_fraction * order.size()));
    std::vector<bool> image_in_train(manifest.images.size(), false);
    for (size_t i = 0; i < n_train && i < order.size(); ++i) image_in_train[order[i]] = true;

    // frozen region features of every ground-truth box
    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
    std::vector<bool> in_train;
    std::vector<int64_t> train_instances(static_cast<size_t>(manifest.num_classes), 0);
    int d = 0;
    for (size_t ii = 0; ii < manifest.images.size(); ++ii) {
        const ImageRecord& im = manifest.images[ii];
        if (im.annotations.empty()) continue;
        if (!im.has_pixels()) throw ContractError("probe image " + std::to_string(im.image_id) + " has no pixels");
        Tape tape;
        FrozenGuard freeze(tape);
        EncoderOutput enc = model.encoder.forward(tape, tape.constant(im.pixels));
        std::vector<BoundingBox> boxes;
        for (const Annotation& a : im.annotations) boxes.push_back(a.box);
        int stage = cfg.stage_index >= 0 ? cfg.stage_index : model.cfg.roi.stage_index;
        int pooled_size = cfg.pooled_size > 0 ? cfg.pooled_size : model.cfg.roi.pooled_size;
        Var pooled = cfg.use_projected
                         ? model.roi.extract(tape, enc, boxes, size)
                         : pool_boxes_on_stage(tape, enc, stage, pooled_size, boxes, size);
        d = pooled.val().size(1);
        for (size_t bi = 0; bi < boxes.size(); ++bi) {
            std::vector<double> row(static_cast<size_t>(d));
            double norm = 0;
            for (int j = 0; j < d; ++j) {
                row[static_cast<size_t>(j)] = pooled.val()[static_cast<int64_t>(bi) * d + j];
                norm += row[static_cast<size_t>(j)] * row[static_cast<size_t>(j)];
            }
            norm = std::max(std::sqrt(norm), 1e-12);
            for (double& v : row) v /= norm;
            rows.push_back(std::move(row));
            labels.push_back(im.annotations[bi].category_id);
            in_train.push_back(image_in_train[ii]);
            if (image_in_train[ii])
                ++train_instances[static_cast<size_t>(im.annotations[bi].category_id)];
        }
    }
    if (rows.empty()) throw DomainError("probe found no annotated boxes");

    Tensor features({static_cast<int>(rows.size()), d});
    for (size_t r = 0; r < rows.size(); ++r)
        for (int j = 0; j < d; ++j) features[static_cast<int64_t>(r) * d + j] = rows[r][static_cast<size_t>(j)];
    return linear_probe(features, labels, manifest.num_classes, in_train, train_instances, cfg);
}

// ---- weight norms ----

WeightNormReport weight_norm_report(const Tensor& classifier_weights,
                                    const std::vector<int64_t>& class_instances,
                                    const GroupCuts& cuts) {
    int c = classifier_weights.size(0), d = classifier_weights.size(1);
    if (static_cast<int>(class_instances.size()) != c)
        throw ContractError("weight_norm_report: instance counts do not match weight rows");
    WeightNormReport rep;
    rep.norms.resize(static_cast<size_t>(c));
    for (int i = 0; i < c; ++i) {
        double s = 0;
        for (int j = 0; j < d; ++j) {
            double v = classifier_weights[static_cast<int64_t>(i) * d + j];
            s += v * v;
        }
        rep.norms[static_cast<size_t>(i)] = std::sqrt(s);
    }
    rep.class_order.resize(static_cast<size_t>(c));
    for (size_t i = 0; i < rep.class_order.size(); ++i) rep.class_order[i] = i;
    std::stable_sort(rep.class_order.begin(), rep.class_order.end(), [&](size_t a, size_t b) {
        return class_instances[a] > class_instances[b];
    });
    std::array<double, 3> sum{};
    std::array<int, 3> n{};
    for (int i = 0; i < c; ++i) {
        size_t g = static_cast<size_t>(frequency_group(class_instances[static_cast<size_t>(i)], cuts));
        sum[g] += rep.norms[static_cast<size_t>(i)];
        ++n[g];
    }
    auto val = [&](FrequencyGroup g) -> std::optional<double> {
        size_t i = static_cast<size_t>(g);
        if (n[i] == 0) return std::nullopt;
        return sum[i] / n[i];
    };
    rep.rare_mean = val(FrequencyGroup::Rare);
    rep.common_mean = val(FrequencyGroup::Common);
    rep.frequent_mean = val(FrequencyGroup::Frequent);
    return rep;
}

std::string weight_norms_to_csv(const WeightNormReport& r,
                                const std::vector<int64_t>& class_instances) {
    std::ostringstream os;
    os << "class_id,instances,weight_norm\n";
    os.precision(17);
    for (size_t idx : r.class_order)
        os << idx << "," << class_instances[idx] << "," << r.norms[idx] << "\n";
    return os.str();
}

}  // namespace ltp
