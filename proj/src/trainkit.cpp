#include "bitflow/trainkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

namespace bitflow::train {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr double kBnEps = 1e-5;
constexpr double kRunningMomentum = 0.1;
constexpr int kEvalBatch = 50;

double sign_of(double v) { return v >= 0.0 ? 1.0 : -1.0; }

struct Geometry {
  int batch;
  int height;
  int width;
  int channels;
  int pixels() const { return batch * height * width; }
};

// Rows are output pixels, columns (fy, fx, c); out-of-image taps read -1.
void im2col(const RowMat& signs, const Geometry& g, int filter, RowMat& cols) {
  const int pad = filter / 2;
  const int k = filter * filter * g.channels;
  cols.resize(g.pixels(), k);
  for (int b = 0; b < g.batch; ++b)
    for (int y = 0; y < g.height; ++y)
      for (int x = 0; x < g.width; ++x) {
        const int p = (b * g.height + y) * g.width + x;
        for (int fy = 0; fy < filter; ++fy)
          for (int fx = 0; fx < filter; ++fx) {
            const int iy = y + fy - pad;
            const int ix = x + fx - pad;
            auto seg = cols.row(p).segment((fy * filter + fx) * g.channels, g.channels);
            if (iy < 0 || iy >= g.height || ix < 0 || ix >= g.width) {
              seg.setConstant(-1.0);
            } else {
              seg = signs.row((b * g.height + iy) * g.width + ix);
            }
          }
      }
}

RowMat col2im(const RowMat& dcols, const Geometry& g, int filter) {
  const int pad = filter / 2;
  RowMat out = RowMat::Zero(g.pixels(), g.channels);
  for (int b = 0; b < g.batch; ++b)
    for (int y = 0; y < g.height; ++y)
      for (int x = 0; x < g.width; ++x) {
        const int p = (b * g.height + y) * g.width + x;
        for (int fy = 0; fy < filter; ++fy)
          for (int fx = 0; fx < filter; ++fx) {
            const int iy = y + fy - pad;
            const int ix = x + fx - pad;
            if (iy < 0 || iy >= g.height || ix < 0 || ix >= g.width) continue;
            out.row((b * g.height + iy) * g.width + ix) +=
                dcols.row(p).segment((fy * filter + fx) * g.channels, g.channels);
          }
      }
  return out;
}

enum class BnMode { kBatch, kRunning };

struct BlockCache {
  RowMat input;
  RowMat cols;
  Eigen::MatrixXd binary_weights;
  RowMat conv;  // before clipping
  RowMat xhat;  // normalized clipped conv (batch mode)
  Eigen::RowVectorXd inv_std;
  Eigen::RowVectorXd batch_mean;
  Eigen::RowVectorXd batch_var;
  // Clipped stage only: where the BN output and the residual sum stayed in range.
  RowMat bn_mask;
  RowMat sum_mask;
};

struct ForwardResult {
  RowMat features;  // final residual stream, pixels x channels
  Eigen::MatrixXd pooled;
  Eigen::MatrixXd logits;
  std::vector<BlockCache> cache;
  RowMat dcols;  // backward scratch
  double peak_conv = 0.0;
  long saturated = 0;
  long conv_values = 0;
};

Eigen::MatrixXd binarize(const Eigen::MatrixXd& w) { return w.unaryExpr(&sign_of); }

int cell_of(int y, int x, int height, int width, int grid) {
  return (y * grid / height) * grid + x * grid / width;
}

// Mean over each cell of a grid x grid partition of the image, times `scale`.
// Output columns are (cell, channel).
template <typename Block>
Eigen::RowVectorXd pool_sample(const Block& pixels, int height, int width, int grid, double scale) {
  const auto c = pixels.cols();
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(grid * grid * c);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(grid * grid);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const int cell = cell_of(y, x, height, width, grid);
      out.segment(cell * c, c) += pixels.row(y * width + x).template cast<double>();
      counts[cell] += 1.0;
    }
  for (int cell = 0; cell < grid * grid; ++cell) out.segment(cell * c, c) *= scale / counts[cell];
  return out;
}

Eigen::MatrixXd pool(const RowMat& features, const Geometry& g, int grid, double scale) {
  const int per = g.height * g.width;
  Eigen::MatrixXd pooled(g.batch, grid * grid * g.channels);
  for (int b = 0; b < g.batch; ++b) {
    pooled.row(b) = pool_sample(features.middleRows(static_cast<Eigen::Index>(b) * per, per), g.height,
                                g.width, grid, scale);
  }
  return pooled;
}

// `r` is reused across calls so the large im2col buffers keep their storage.
void forward(const TrainState& s, const RowMat& x0, const Geometry& g, bool clip, BnMode mode, ForwardResult& r) {
  r.peak_conv = 0.0;
  r.saturated = 0;
  r.conv_values = 0;
  r.cache.resize(s.blocks.size());
  RowMat x = x0;
  for (std::size_t l = 0; l < s.blocks.size(); ++l) {
    const BlockState& blk = s.blocks[l];
    BlockCache& c = r.cache[l];
    c.input = x;
    im2col(x.unaryExpr(&sign_of), g, s.model.filter, c.cols);
    c.binary_weights = binarize(blk.weights);
    c.conv.resize(g.pixels(), c.binary_weights.rows());
    c.conv.noalias() = c.cols * c.binary_weights.transpose();

    r.peak_conv = std::max(r.peak_conv, c.conv.cwiseAbs().maxCoeff());
    r.saturated += (c.conv.array().abs() > kI8Max).count();
    r.conv_values += c.conv.size();

    const RowMat z = clip ? RowMat(c.conv.cwiseMax(kI8Min).cwiseMin(kI8Max)) : c.conv;
    RowMat y;
    if (blk.frozen_bn) {
      const BNParams& f = *blk.frozen_bn;
      const Eigen::RowVectorXd scale = (f.gamma.array() / f.sigma.array()).matrix().transpose();
      y = ((z.rowwise() - f.mu.transpose()).array().rowwise() * scale.array()).rowwise() +
          f.beta.transpose().array();
    } else if (mode == BnMode::kBatch) {
      c.batch_mean = z.colwise().mean();
      const RowMat centered = z.rowwise() - c.batch_mean;
      c.batch_var = centered.array().square().colwise().mean();
      c.inv_std = (c.batch_var.array() + kBnEps).rsqrt();
      c.xhat = centered.array().rowwise() * c.inv_std.array();
      y = (c.xhat.array().rowwise() * blk.gamma.transpose().array()).rowwise() + blk.beta.transpose().array();
    } else {
      const Eigen::RowVectorXd inv = (blk.running_var.array() + kBnEps).rsqrt().matrix().transpose();
      y = (((z.rowwise() - blk.running_mean.transpose()).array().rowwise() * inv.array()).rowwise() *
           blk.gamma.transpose().array())
              .rowwise() +
          blk.beta.transpose().array();
    }
    if (clip) {
      c.bn_mask = (y.array().abs() <= kI8Max).cast<double>();
      y = y.cwiseMax(kI8Min).cwiseMin(kI8Max);
      x += y;
      c.sum_mask = (x.array().abs() <= kI8Max).cast<double>();
      x = x.cwiseMax(kI8Min).cwiseMin(kI8Max);
    } else {
      x += y;
    }
  }
  r.pooled = pool(x, g, s.model.pool_grid, s.model.readout_scale);
  r.logits = (r.pooled * s.readout.transpose()).rowwise() + s.readout_bias.transpose();
  r.features = std::move(x);
}

// Mean cross-entropy; writes d(loss)/d(logits) when `dlogits` is non-null.
double cross_entropy(const Eigen::MatrixXd& logits, std::span<const int> labels, Eigen::MatrixXd* dlogits,
                     std::vector<int>* predictions) {
  const auto n = logits.rows();
  double loss = 0.0;
  if (dlogits) dlogits->resize(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::RowVectorXd row = logits.row(i);
    Eigen::Index best = 0;
    const double peak = row.maxCoeff(&best);
    const Eigen::RowVectorXd e = (row.array() - peak).exp();
    const double z = e.sum();
    loss += -(row[labels[i]] - peak - std::log(z));
    if (dlogits) {
      dlogits->row(i) = e / z;
      (*dlogits)(i, labels[i]) -= 1.0;
    }
    if (predictions) predictions->push_back(static_cast<int>(best));
  }
  if (dlogits) *dlogits /= static_cast<double>(n);
  return loss / static_cast<double>(n);
}

RowMat gather_rows(const Dataset& d, std::span<const int> rows, Geometry& g) {
  g = {static_cast<int>(rows.size()), d.height, d.width, d.channels};
  const int per = d.height * d.width;
  RowMat x(static_cast<Eigen::Index>(rows.size()) * per, d.channels);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int p = 0; p < per; ++p) {
      x.row(static_cast<Eigen::Index>(i) * per + p) = d.images.row(rows[i]).segment(p * d.channels, d.channels);
    }
  }
  return x;
}

std::vector<int> labels_of(const Dataset& d, std::span<const int> rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (int r : rows) out.push_back(d.labels[r]);
  return out;
}

void backward(const TrainState& s, ForwardResult& fw, const Geometry& g, const Eigen::MatrixXd& dlogits,
              bool clip, Gradients& grads) {
  const std::size_t L = s.blocks.size();
  grads.weights.resize(L);
  grads.gamma.resize(L);
  grads.beta.resize(L);
  grads.readout = dlogits.transpose() * fw.pooled;
  grads.readout_bias = dlogits.colwise().sum().transpose();

  const Eigen::MatrixXd dpooled = dlogits * s.readout;
  const int grid = s.model.pool_grid;
  const int per = g.height * g.width;
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(grid * grid);
  for (int y = 0; y < g.height; ++y)
    for (int x = 0; x < g.width; ++x) counts[cell_of(y, x, g.height, g.width, grid)] += 1.0;
  RowMat dx(fw.features.rows(), fw.features.cols());
  for (int b = 0; b < g.batch; ++b)
    for (int y = 0; y < g.height; ++y)
      for (int x = 0; x < g.width; ++x) {
        const int cell = cell_of(y, x, g.height, g.width, grid);
        dx.row(static_cast<Eigen::Index>(b) * per + y * g.width + x) =
            dpooled.row(b).segment(cell * g.channels, g.channels) * (s.model.readout_scale / counts[cell]);
      }

  for (std::size_t l = L; l-- > 0;) {
    const BlockState& blk = s.blocks[l];
    const BlockCache& c = fw.cache[l];
    if (clip) dx.array() *= c.sum_mask.array();
    const RowMat dy = clip ? RowMat(dx.array() * c.bn_mask.array()) : dx;
    RowMat dz;
    if (blk.frozen_bn) {
      const BNParams& f = *blk.frozen_bn;
      const Eigen::RowVectorXd scale = (f.gamma.array() / f.sigma.array()).matrix().transpose();
      dz = dy.array().rowwise() * scale.array();
      grads.gamma[l] = Eigen::VectorXd::Zero(blk.gamma.size());
      grads.beta[l] = Eigen::VectorXd::Zero(blk.beta.size());
    } else {
      const double n = static_cast<double>(dy.rows());
      grads.gamma[l] = (dy.array() * c.xhat.array()).colwise().sum().transpose();
      grads.beta[l] = dy.colwise().sum().transpose();
      const RowMat dxhat = dy.array().rowwise() * blk.gamma.transpose().array();
      const Eigen::RowVectorXd sum_dxhat = dxhat.colwise().sum();
      const Eigen::RowVectorXd sum_dxhat_xhat = (dxhat.array() * c.xhat.array()).colwise().sum();
      dz = ((dxhat * n).rowwise() - sum_dxhat - (c.xhat.array().rowwise() * sum_dxhat_xhat.array()).matrix())
               .array()
               .rowwise() *
           (c.inv_std.array() / n);
    }
    if (clip) dz = dz.array() * (c.conv.array().abs() <= kI8Max).cast<double>();

    const Eigen::MatrixXd dwb = dz.transpose() * c.cols;
    grads.weights[l] = dwb.array() * (blk.weights.array().abs() <= 1.0).cast<double>();

    fw.dcols.resize(dz.rows(), c.binary_weights.cols());
    fw.dcols.noalias() = dz * c.binary_weights;
    const RowMat dsigns = col2im(fw.dcols, g, s.model.filter);
    dx += RowMat(dsigns.array() * (c.input.array().abs() <= 1.0).cast<double>());
  }
}

void apply_update(TrainState& s, const Gradients& grads, double lr) {
  const double mom = s.optimizer.momentum;
  for (std::size_t l = 0; l < s.blocks.size(); ++l) {
    BlockState& b = s.blocks[l];
    b.weights_velocity = mom * b.weights_velocity + grads.weights[l];
    b.weights = (b.weights - lr * b.weights_velocity).cwiseMax(-1.0).cwiseMin(1.0);
    if (!b.frozen_bn) {
      b.gamma_velocity = mom * b.gamma_velocity + grads.gamma[l];
      b.beta_velocity = mom * b.beta_velocity + grads.beta[l];
      b.gamma -= lr * b.gamma_velocity;
      b.beta -= lr * b.beta_velocity;
    }
  }
  s.readout_velocity = mom * s.readout_velocity + grads.readout;
  s.readout_bias_velocity = mom * s.readout_bias_velocity + grads.readout_bias;
  s.readout -= lr * s.readout_velocity;
  s.readout_bias -= lr * s.readout_bias_velocity;
}

void update_running_stats(TrainState& s, const ForwardResult& fw) {
  for (std::size_t l = 0; l < s.blocks.size(); ++l) {
    BlockState& b = s.blocks[l];
    if (b.frozen_bn) continue;
    const BlockCache& c = fw.cache[l];
    b.running_mean = (1.0 - kRunningMomentum) * b.running_mean + kRunningMomentum * c.batch_mean.transpose();
    b.running_var = (1.0 - kRunningMomentum) * b.running_var + kRunningMomentum * c.batch_var.transpose();
  }
}

void run_epochs_scaled(TrainState& state, const ToyTask& task, int epochs, bool clip, double lr_scale) {
  if (epochs <= 0) return;
  const Dataset& train = task.train;
  const int bs = std::max(1, state.optimizer.batch_size);
  const int steps_per_epoch = (train.size() + bs - 1) / bs;
  const long total_steps = static_cast<long>(steps_per_epoch) * epochs;
  long step = 0;
  std::vector<int> order(train.size());
  ForwardResult fw;

  for (int e = 0; e < epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(state.shuffle_seed + static_cast<std::uint64_t>(state.epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    long correct = 0;
    for (int start = 0; start < train.size(); start += bs, ++step) {
      const std::span<const int> rows(order.data() + start, std::min(bs, train.size() - start));
      Geometry g{};
      const RowMat x0 = gather_rows(train, rows, g);
      const std::vector<int> labels = labels_of(train, rows);
      forward(state, x0, g, clip, BnMode::kBatch, fw);
      Eigen::MatrixXd dlogits;
      std::vector<int> predictions;
      const double loss = cross_entropy(fw.logits, labels, &dlogits, &predictions);
      if (!std::isfinite(loss)) {
        throw Error("training diverged at epoch " + std::to_string(state.epoch) + " (non-finite loss)");
      }
      Gradients grads;
      backward(state, fw, g, dlogits, clip, grads);
      const double lr = state.optimizer.learning_rate * lr_scale * 0.5 *
                        (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total_steps));
      apply_update(state, grads, lr);
      update_running_stats(state, fw);

      loss_sum += loss * static_cast<double>(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) correct += predictions[i] == labels[i];
    }
    ++state.epoch;
    state.history.push_back(
        {state.epoch, "train", loss_sum / train.size(), 100.0 * static_cast<double>(correct) / train.size()});
    const Evaluation v = evaluate(state, task.val, clip);
    state.history.push_back({state.epoch, "val", v.loss, v.accuracy});
  }
}

int argmax(const Eigen::VectorXd& v) {
  Eigen::Index best = 0;
  v.maxCoeff(&best);
  return static_cast<int>(best);
}

}  // namespace

SurrogateResult ste_sign(double x) { return {sign_of(x), (x >= -1.0 && x <= 1.0) ? 1 : 0}; }

SurrogateResult clip_i8_surrogate(double x) {
  return {std::clamp<double>(x, kI8Min, kI8Max), (x >= kI8Min && x <= kI8Max) ? 1 : 0};
}

GradCheckReport grad_check(SurrogateOp op, std::span<const double> points, double step) {
  const auto forward_fn = [op](double x) {
    return op == SurrogateOp::kSignClamp ? std::clamp(x, -1.0, 1.0) : clip_i8_surrogate(x).value;
  };
  const auto near_kink = [op](double x) {
    const double a = std::abs(x);
    return op == SurrogateOp::kSignClamp ? (a >= 0.99 && a <= 1.01) : (a >= 126.0 && a <= 128.0);
  };
  const auto mask = [op](double x) {
    return op == SurrogateOp::kSignClamp ? ste_sign(x).grad_mask : clip_i8_surrogate(x).grad_mask;
  };
  GradCheckReport report;
  for (double x : points) {
    if (near_kink(x)) {
      ++report.skipped;
      continue;
    }
    const double fd = (forward_fn(x + step) - forward_fn(x - step)) / (2.0 * step);
    report.max_abs_error = std::max(report.max_abs_error, std::abs(fd - mask(x)));
    ++report.checked;
  }
  return report;
}

BNParams BlockState::bn_params() const {
  if (frozen_bn) return *frozen_bn;
  BNParams p;
  p.gamma = gamma;
  p.beta = beta;
  p.mu = running_mean;
  p.sigma = (running_var.array() + kBnEps).sqrt().matrix();
  return p;
}

TrainState init_state(const ToyTask& task, OptimizerConfig optimizer) {
  const ModelConfig& m = task.config.model;
  if (m.blocks < 1) throw Error("init_state: need at least one block");
  if (m.filter < 1 || m.filter % 2 == 0) throw Error("init_state: filter must be odd");
  if (m.pool_grid < 1 || m.pool_grid > std::min(task.config.height, task.config.width)) {
    throw Error("init_state: pool grid does not fit the image");
  }
  if (m.channels != task.config.channels) {
    throw Error("init_state: identity shortcuts need block channels == input channels");
  }
  TrainState s;
  s.model = m;
  s.optimizer = optimizer;
  s.in_channels = task.config.channels;
  s.classes = task.config.classes;
  s.shuffle_seed = task.config.seed ^ 0x5DEECE66Dull;

  std::mt19937_64 rng(task.config.seed + 1);
  std::uniform_real_distribution<double> uni(-0.1, 0.1);
  const int k = m.filter * m.filter * m.channels;
  for (int l = 0; l < m.blocks; ++l) {
    BlockState b;
    b.weights = Eigen::MatrixXd::NullaryExpr(m.channels, k, [&] { return uni(rng); });
    b.gamma = Eigen::VectorXd::Constant(m.channels, m.gamma_init);
    b.beta = Eigen::VectorXd::Zero(m.channels);
    b.running_mean = Eigen::VectorXd::Zero(m.channels);
    b.running_var = Eigen::VectorXd::Ones(m.channels);
    b.weights_velocity = Eigen::MatrixXd::Zero(m.channels, k);
    b.gamma_velocity = Eigen::VectorXd::Zero(m.channels);
    b.beta_velocity = Eigen::VectorXd::Zero(m.channels);
    s.blocks.push_back(std::move(b));
  }
  const int pooled = m.pool_grid * m.pool_grid * m.channels;
  s.readout = Eigen::MatrixXd::NullaryExpr(s.classes, pooled, [&] { return uni(rng); });
  s.readout_bias = Eigen::VectorXd::Zero(s.classes);
  s.readout_velocity = Eigen::MatrixXd::Zero(s.classes, pooled);
  s.readout_bias_velocity = Eigen::VectorXd::Zero(s.classes);
  return s;
}

void run_epochs(TrainState& state, const ToyTask& task, int epochs, bool clip, double lr_scale) {
  run_epochs_scaled(state, task, epochs, clip, lr_scale);
}

TrainState train_stage1(const ToyTask& task, int epochs, OptimizerConfig optimizer) {
  TrainState s = init_state(task, optimizer);
  run_epochs(s, task, epochs, false);
  return s;
}

TrainState train_stage2(TrainState state, const ToyTask& task, int epochs) {
  if (state.stage != Stage::kWarmup) throw Error("train_stage2: state is not in the warm-up stage");
  state.stage = Stage::kClipped;
  run_epochs(state, task, epochs, true);
  return state;
}

Evaluation evaluate(const TrainState& state, const Dataset& data, bool clip) {
  Evaluation ev;
  double loss_sum = 0.0;
  long saturated = 0;
  long total = 0;
  std::vector<int> rows;
  ForwardResult fw;
  for (int start = 0; start < data.size(); start += kEvalBatch) {
    rows.resize(std::min(kEvalBatch, data.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    Geometry g{};
    const RowMat x0 = gather_rows(data, rows, g);
    forward(state, x0, g, clip, BnMode::kRunning, fw);
    const std::vector<int> labels = labels_of(data, rows);
    loss_sum += cross_entropy(fw.logits, labels, nullptr, &ev.predictions) * static_cast<double>(rows.size());
    ev.peak_conv = std::max(ev.peak_conv, fw.peak_conv);
    saturated += fw.saturated;
    total += fw.conv_values;
  }
  long correct = 0;
  for (int i = 0; i < data.size(); ++i) correct += ev.predictions[i] == data.labels[i];
  ev.loss = loss_sum / data.size();
  ev.accuracy = 100.0 * static_cast<double>(correct) / data.size();
  ev.saturation_rate = total ? static_cast<double>(saturated) / static_cast<double>(total) : 0.0;
  return ev;
}

double loss_and_gradients(const TrainState& state, const Dataset& data, std::span<const int> rows, bool clip,
                          Gradients* grads) {
  Geometry g{};
  const RowMat x0 = gather_rows(data, rows, g);
  const std::vector<int> labels = labels_of(data, rows);
  ForwardResult fw;
  forward(state, x0, g, clip, BnMode::kBatch, fw);
  Eigen::MatrixXd dlogits;
  const double loss = cross_entropy(fw.logits, labels, grads ? &dlogits : nullptr, nullptr);
  if (grads) backward(state, fw, g, dlogits, clip, *grads);
  return loss;
}

TrainState bn_quantize_retrain(TrainState state, const ToyTask& task, QuantizeOptions options) {
  if (state.stage != Stage::kClipped) throw Error("bn_quantize_retrain: state must be in the clipped stage");
  state.exported.clear();
  for (BlockState& blk : state.blocks) {
    QuantizedBN q = quantize_bn(blk.bn_params());
    blk.frozen_bn = std::move(q.noisy);
    state.exported.push_back(std::move(q.tables));
    run_epochs(state, task, options.retrain_epochs, true, options.lr_scale);
  }
  return state;
}

std::vector<I8FeatureMap> deployed_features(const TrainState& state, const Dataset& data) {
  if (state.exported.size() != state.blocks.size()) {
    throw Error("deployed_features: BN layers have not been quantized");
  }
  std::vector<I8FeatureMap> out;
  out.reserve(data.size());
  std::vector<int> rows;
  RowMat cols;
  RowMat conv;
  const int per = data.height * data.width;
  for (int start = 0; start < data.size(); start += kEvalBatch) {
    rows.resize(std::min(kEvalBatch, data.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    Geometry g{};
    RowMat x = gather_rows(data, rows, g).unaryExpr([](double v) {
      return static_cast<double>(round_half_away(std::clamp<double>(v, kI8Min, kI8Max)));
    });
    for (std::size_t l = 0; l < state.blocks.size(); ++l) {
      const QBNParams& q = state.exported[l];
      const int frac = q.mc_format.frac_bits();
      im2col(x.unaryExpr(&sign_of), g, state.model.filter, cols);
      conv.resize(cols.rows(), state.blocks[l].weights.rows());
      conv.noalias() = cols * binarize(state.blocks[l].weights).transpose();
      for (Eigen::Index p = 0; p < x.rows(); ++p) {
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
          const int z = saturate_i8(static_cast<std::int64_t>(conv(p, c)));
          const int y = bn_q_value(z, q.m_q[c], q.c_q[c], frac);
          x(p, c) = saturate_i8(static_cast<std::int64_t>(x(p, c)) + y);
        }
      }
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
      I8FeatureMap f({1, data.height, data.width, data.channels});
      for (int p = 0; p < per; ++p)
        for (int c = 0; c < data.channels; ++c) {
          f.data()[p * data.channels + c] = static_cast<std::int8_t>(x(static_cast<Eigen::Index>(i) * per + p, c));
        }
      out.push_back(std::move(f));
    }
  }
  return out;
}

namespace {

Eigen::VectorXd readout_logits(const TrainState& state, const I8FeatureMap& features) {
  const Shape4& s = features.shape();
  const Eigen::VectorXd pooled =
      pool_sample(features.pixels(), s.h, s.w, state.model.pool_grid, state.model.readout_scale).transpose();
  return state.readout * pooled + state.readout_bias;
}

}  // namespace

int predict_class(const TrainState& state, const I8FeatureMap& features) {
  if (features.shape().c != state.model.channels || features.shape().n != 1) {
    throw Error("predict_class: expected one sample with " + std::to_string(state.model.channels) + " channels");
  }
  return argmax(readout_logits(state, features));
}

Evaluation evaluate_deployed(const TrainState& state, const Dataset& data) {
  Evaluation ev;
  const auto features = deployed_features(state, data);
  double loss_sum = 0.0;
  long correct = 0;
  for (int i = 0; i < data.size(); ++i) {
    const Eigen::VectorXd logits = readout_logits(state, features[i]);
    const int label = data.labels[i];
    const double peak = logits.maxCoeff();
    loss_sum += -(logits[label] - peak - std::log((logits.array() - peak).exp().sum()));
    ev.predictions.push_back(argmax(logits));
    correct += ev.predictions.back() == label;
  }
  ev.loss = loss_sum / data.size();
  ev.accuracy = 100.0 * static_cast<double>(correct) / data.size();
  return ev;
}

namespace {

PackedKernelSet pack_block(const TrainState& state, const BlockState& b) {
  const int f = state.model.filter;
  const int c = state.model.channels;
  SignTensor w({static_cast<int>(b.weights.rows()), f, f, c});
  for (int o = 0; o < w.shape().n; ++o)
    for (int fy = 0; fy < f; ++fy)
      for (int fx = 0; fx < f; ++fx)
        for (int ch = 0; ch < c; ++ch) {
          w(o, fy, fx, ch) = static_cast<std::int8_t>(sign_of(b.weights(o, (fy * f + fx) * c + ch)));
        }
  return pack_weights(w);
}

}  // namespace

Model export_model(const TrainState& state) {
  if (state.exported.size() != state.blocks.size()) {
    throw Error("export_model: BN layers have not been quantized");
  }
  Model m;
  for (std::size_t l = 0; l < state.blocks.size(); ++l) {
    m.layers.emplace_back(
        ResnetBlock{pack_block(state, state.blocks[l]), ConvSpec::same(state.model.filter), state.exported[l]});
  }
  return m;
}

Model export_float_model(const TrainState& state) {
  Model m;
  for (const BlockState& b : state.blocks) {
    m.layers.emplace_back(FloatBnLayer{pack_block(state, b), ConvSpec::same(state.model.filter), b.bn_params()});
  }
  return m;
}

void write_curves_csv(const TrainState& state, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw Error("cannot open " + path.string());
  f << "epoch,split,loss,accuracy\n";
  for (const auto& r : state.history) f << r.epoch << ',' << r.split << ',' << r.loss << ',' << r.accuracy << '\n';
}

}  // namespace bitflow::train
