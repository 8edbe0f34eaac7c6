#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "ltp/data.hpp"
#include "ltp/models.hpp"

namespace ltp {

struct Prediction {
    int64_t image_id = 0;
    BoundingBox box;
    int class_id = 0;
    double score = 0.0;
};

// Five-way taxonomy over (class match, IoU band). Boundary IoU values land in
// the higher band so the partition is total.
enum class ErrorCategory { Correct, LocationError, BackgroundError, ClassificationError, Other };

constexpr std::array<const char*, 5> kErrorCategoryNames = {
    "correct", "location_error", "background_error", "classification_error", "other"};

// Matches against the ground-truth box of maximal IoU; ties pick the lowest
// annotation index. Empty ground truth is a background error by definition.
ErrorCategory categorize(const Prediction& pred, const std::vector<Annotation>& gt);

struct GroupCuts {
    int64_t rare_max = 10;     // rare: instances <= rare_max
    int64_t common_max = 100;  // common: rare_max < instances <= common_max
};

enum class FrequencyGroup { Rare, Common, Frequent };

constexpr std::array<const char*, 3> kGroupNames = {"rare", "common", "frequent"};

FrequencyGroup frequency_group(int64_t instances, const GroupCuts& cuts);

struct ErrorBreakdown {
    // [group][category]
    std::array<std::array<int64_t, 5>, 3> counts{};
    int64_t classified = 0;
};

// Top-N predictions per predicted class (by score), each categorized against
// its image's ground truth and tallied under the predicted class's frequency
// group.
ErrorBreakdown analyze_errors(const std::vector<Prediction>& preds, const DatasetManifest& gt,
                              const GroupCuts& cuts, int top_n = 100);

std::vector<Prediction> load_predictions(const std::string& path);
void save_predictions(const std::vector<Prediction>& preds, const std::string& path);
std::string breakdown_to_json(const ErrorBreakdown& b);

// ---- frozen-feature probe ----

struct ProbeConfig {
    double train_fraction = 0.8;  // split by image
    int epochs = 30;
    int batch_size = 128;
    double lr = 1.0;
    double momentum = 0.9;
    uint64_t seed = 0;
    GroupCuts cuts;
    int stage_index = -1;   // encoder stage to pool; -1 = the model's RoI stage
    int pooled_size = -1;   // -1 = the model's RoI pooled size
    bool use_projected = false;  // probe the proposal-projection embeddings instead
};

struct ProbeReport {
    std::vector<double> per_class_accuracy;  // -1 marks classes absent from the eval split
    std::vector<int64_t> train_instances;
    std::optional<double> rare, common, frequent;  // macro accuracy; empty group reported absent
    double overall = 0.0;                          // micro accuracy over eval boxes
    Tensor classifier_weights;                     // {C, D}
    int64_t train_boxes = 0, eval_boxes = 0;
};

// Trains a linear classifier on frozen region features of ground-truth boxes
// (classification probe; the encoder never updates) and reports accuracy per
// frequency group.
ProbeReport probe_eval(Model& model, const DatasetManifest& manifest, const ProbeConfig& cfg);

// probe core on explicit features; exposed so oracle features can drive it
ProbeReport linear_probe(const Tensor& features, const std::vector<int>& labels, int num_classes,
                         const std::vector<bool>& in_train, const std::vector<int64_t>& train_instances,
                         const ProbeConfig& cfg);

// ---- classifier weight-norm diagnostics ----

struct WeightNormReport {
    std::vector<double> norms;        // per class, manifest order
    std::vector<size_t> class_order;  // sorted by descending frequency
    std::optional<double> rare_mean, common_mean, frequent_mean;
};

WeightNormReport weight_norm_report(const Tensor& classifier_weights,
                                    const std::vector<int64_t>& class_instances,
                                    const GroupCuts& cuts);
std::string weight_norms_to_csv(const WeightNormReport& r,
                                const std::vector<int64_t>& class_instances);

}  // namespace ltp
