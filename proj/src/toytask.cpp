#include <cmath>
#include <random>

#include "bitflow/trainkit.hpp"

namespace bitflow::train {

namespace {

Dataset make_split(const ToyTaskConfig& cfg, int count, std::mt19937_64& rng,
                   const Eigen::VectorXd& channel_code) {
  Dataset d;
  d.height = cfg.height;
  d.width = cfg.width;
  d.channels = cfg.channels;
  const int features = cfg.height * cfg.width * cfg.channels;
  d.images.resize(count, features);
  d.labels.resize(count);

  std::uniform_int_distribution<int> pick_label(0, cfg.classes - 1);
  std::uniform_real_distribution<double> gain(0.6, 1.2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, cfg.noise);

  for (int i = 0; i < count; ++i) {
    const int label = pick_label(rng);
    const double agree = 0.5 + 0.5 * label / (cfg.classes - 1);
    const double a = cfg.amplitude * gain(rng);
    for (int j = 0; j < features; ++j) {
      const int c = j % cfg.channels;
      const double s = unit(rng) < agree ? 1.0 : -1.0;
      const double v = a * s * channel_code[c] + noise(rng);
      d.images(i, j) = static_cast<double>(round_half_away(std::clamp(v, -127.0, 127.0)));
    }
    d.labels[i] = label;
  }
  return d;
}

}  // namespace

RealTensor Dataset::batch(std::span<const int> rows) const {
  RealTensor out({static_cast<int>(rows.size()), height, width, channels});
  const std::size_t per = static_cast<std::size_t>(height) * width * channels;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < per; ++j) {
      out.data()[i * per + j] = static_cast<float>(images(rows[i], static_cast<Eigen::Index>(j)));
    }
  }
  return out;
}

ToyTask make_toy_task(const ToyTaskConfig& config) {
  if (config.classes < 2 || config.classes > 10) throw Error("toy task: classes must be in [2, 10]");
  if (config.train_size <= 0 || config.val_size <= 0) throw Error("toy task: empty split");
  std::mt19937_64 rng(config.seed);
  Eigen::VectorXd code(config.channels);
  std::bernoulli_distribution coin(0.5);
  for (int c = 0; c < config.channels; ++c) code[c] = coin(rng) ? 1.0 : -1.0;

  ToyTask task;
  task.config = config;
  task.train = make_split(config, config.train_size, rng, code);
  task.val = make_split(config, config.val_size, rng, code);
  return task;
}

}  // namespace bitflow::train
