#include "voxscreen/protocol.hpp"

#include <chrono>
#include <exception>
#include <numeric>
#include <stdexcept>

#include "voxscreen/losses.hpp"

namespace voxscreen::protocol {

namespace {

/// OpenMP loop over [0, n) that rethrows the first exception on the caller.
template <typename F>
void parallel_for(int64_t n, F&& body) {
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic)
  for (int64_t i = 0; i < n; ++i) {
    try {
      body(i);
    } catch (...) {
#pragma omp critical
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void shuffle(std::vector<size_t>& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[size_t(rng.uniform_int(0, int64_t(i) - 1))]);
}

}  // namespace

std::vector<Box3> Dataset::boxes_of(size_t i) const {
  std::vector<Box3> out;
  for (const auto& a : boxes[i]) out.push_back(a.box);
  return out;
}

std::vector<eval::GroundTruth> Dataset::ground_truth(std::span<const size_t> idx) const {
  std::vector<eval::GroundTruth> out;
  for (size_t i : idx) {
    for (const auto& a : boxes[i]) out.push_back({volumes[i].id(), a.label, a.box});
  }
  return out;
}

Dataset load_dataset(const std::filesystem::path& manifest) {
  Dataset d;
  for (const auto& e : read_manifest(manifest)) {
    Volume v = load_volume(resolve_volume_path(manifest, e));
    v.set_id(e.id);
    d.volumes.push_back(std::move(v));
    d.labels.push_back(e.boxes.empty() ? 0 : 1);
    d.boxes.push_back(e.boxes);
  }
  return d;
}

Dataset synth_dataset(const synth::DatasetConfig& cfg) {
  cfg.validate();
  const auto counts =
      cfg.kind == synth::DatasetConfig::Kind::bags ? synth::bag_target_counts(cfg) : std::vector<int>{};
  const int64_t n = cfg.sample_count();
  Dataset d;
  d.volumes.resize(size_t(n));
  d.boxes.resize(size_t(n));
  d.labels.resize(size_t(n));
  parallel_for(n, [&](int64_t i) {
    synth::Sample s = synth::make_sample(cfg, i, counts);
    d.volumes[size_t(i)] = std::move(s.volume);
    d.boxes[size_t(i)] = std::move(s.boxes);
    d.labels[size_t(i)] = s.label;
  });
  return d;
}

// Classification ----------------------------------------------------------------

std::vector<Volume> classifier_inputs(const Dataset& data, const preprocess::PreprocessConfig& pre) {
  std::vector<Volume> out(data.size());
  parallel_for(int64_t(data.size()), [&](int64_t i) {
    out[size_t(i)] = pre.rescale ? preprocess::rescale_volume(data.volumes[size_t(i)], pre.s) : data.volumes[size_t(i)];
    out[size_t(i)].set_id(data.volumes[size_t(i)].id());
  });
  return out;
}

void train_classifier(models::Classifier<float>& model, const std::vector<Volume>& inputs, const std::vector<int>& labels,
                      std::span<const size_t> idx, const ClsRun& run, const LossLog& log) {
  run.train.validate();
  if (idx.empty()) throw std::invalid_argument("train_classifier: empty training set");
  model.set_training(true);
  auto params = model.parameters();
  nn::AdamState<float> adam;
  Rng rng(run.seed);
  Rng order_rng = rng.split("order"), aug_rng = rng.split("augment");
  std::vector<size_t> order;
  size_t cursor = 0;
  const int64_t steps = run.train.total_steps(static_cast<int64_t>(idx.size()));
  for (int64_t step = 0; step < steps; ++step) {
    nn::zero_grad<float>(params);
    std::vector<Volume> batch;
    std::vector<float> y;
    for (int64_t b = 0; b < run.train.batch_size; ++b) {
      if (cursor == order.size()) {
        order.assign(idx.begin(), idx.end());
        shuffle(order, order_rng);
        cursor = 0;
      }
      const size_t i = order[cursor++];
      batch.push_back(preprocess::augment(inputs[i], run.pre, aug_rng));
      y.push_back(float(labels[i]));
    }
    std::vector<float> w;
    for (float label : y) w.push_back(label > 0.5f ? float(run.train.positive_weight) : 1.f);
    const nn::Tensor<float> logits = model.forward(models::batch_tensor<float>(batch));
    const nn::Tensor<float> loss = nn::scale(nn::bce_with_logits<float>(logits, y, w), 1.0 / double(y.size()));
    const double step_loss = loss.item();
    loss.backward();
    nn::adam_step<float>(params, adam, run.train, run.train.learning_rate_at(step, steps));
    if (log) log(step, step_loss);
  }
  model.set_training(false);
}

std::vector<double> score_classifier(models::Classifier<float>& model, const std::vector<Volume>& inputs,
                                     std::span<const size_t> idx) {
  std::vector<double> scores;
  scores.reserve(idx.size());
  nn::NoGradGuard no_grad;
  const bool was_training = model.training();
  model.set_training(false);
  for (size_t i : idx) {
    const float logit = model.forward(models::volume_tensor<float>(inputs[i])).item();
    scores.push_back(1.0 / (1.0 + std::exp(-double(logit))));
  }
  model.set_training(was_training);
  return scores;
}

std::vector<FoldResult> cross_validate(const Dataset& data, const std::vector<eval::TrainTest>& splits, const ClsRun& run,
                                       int max_splits, const FoldLog& log) {
  const auto inputs = classifier_inputs(data, run.pre);
  std::vector<FoldResult> out;
  Rng root(run.seed);
  for (size_t f = 0; f < splits.size(); ++f) {
    if (max_splits > 0 && f == size_t(max_splits)) break;
    const uint64_t fold_seed = root.split(f).next_u64();
    models::Classifier<float> model(run.model, fold_seed);
    ClsRun fold_run = run;
    fold_run.seed = fold_seed;
    FoldResult r;
    const auto t0 = std::chrono::steady_clock::now();
    train_classifier(model, inputs, data.labels, splits[f].train, fold_run,
                     [&](int64_t, double loss) { r.losses.push_back(loss); });
    r.train_seconds = seconds_since(t0);
    const auto scores = score_classifier(model, inputs, splits[f].test);
    std::vector<int> labels;
    for (size_t i : splits[f].test) labels.push_back(data.labels[i]);
    r.metrics = eval::classification_metrics(scores, labels, run.eval.classification_threshold);
    if (log) log(f, r);
    out.push_back(std::move(r));
  }
  return out;
}

// Detection ---------------------------------------------------------------------

void train_detector(detect::Detector& model, const Dataset& data, std::span<const size_t> idx, const DetRun& run,
                    const LossLog& log) {
  std::vector<detect::DetSample> samples(idx.size());
  parallel_for(int64_t(idx.size()), [&](int64_t k) {
    const size_t i = idx[size_t(k)];
    samples[size_t(k)] = detect::prepare_sample(data.volumes[i], data.boxes_of(i), run.pre.resample_factor);
  });
  detect::train_detector(model, samples, run.train, run.seed,
                         [&](int64_t step, double loss, const detect::LossStats&) {
                           if (log) log(step, loss);
                         });
}

std::vector<Detection> run_detector(detect::Detector& model, const Dataset& data, std::span<const size_t> idx,
                                    const DetRun& run) {
  std::vector<Detection> out;
  for (size_t i : idx) {
    const auto dets = detect::detect(model, data.volumes[i], run.pre, run.eval.nms_iou, 0.0);
    out.insert(out.end(), dets.begin(), dets.end());
  }
  return out;
}

std::vector<SplitResult> evaluate_detector(const Dataset& data, const std::vector<eval::TrainTest>& splits,
                                           const DetRun& run, int max_splits, const SplitLog& log) {
  std::vector<SplitResult> out;
  Rng root(run.seed);
  for (size_t s = 0; s < splits.size(); ++s) {
    if (max_splits > 0 && s == size_t(max_splits)) break;
    const uint64_t split_seed = root.split(s).next_u64();
    auto model = detect::make_detector(run.detector, run.pre.resample_factor, split_seed);
    DetRun split_run = run;
    split_run.seed = split_seed;
    SplitResult r;
    const auto t0 = std::chrono::steady_clock::now();
    train_detector(*model, data, splits[s].train, split_run, [&](int64_t, double loss) { r.losses.push_back(loss); });
    r.train_seconds = seconds_since(t0);
    r.detections = run_detector(*model, data, splits[s].test, split_run);
    r.truth = data.ground_truth(splits[s].test);
    r.pr = eval::detection_pr(r.detections, r.truth, run.eval);
    if (run.eval.ap_prefilter) {
      std::vector<Detection> kept;
      for (const auto& d : r.detections) {
        if (d.score >= run.eval.score_threshold) kept.push_back(d);
      }
      r.ap = r.truth.empty() ? 0.0 : eval::average_precision(kept, r.truth, run.eval.iou_threshold);
    } else {
      r.ap = r.truth.empty() ? 0.0 : eval::average_precision(r.detections, r.truth, run.eval.iou_threshold);
    }
    if (log) log(s, r);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace voxscreen::protocol
