#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "modenorm/rng.hpp"
#include "modenorm/tensor.hpp"

namespace modenorm {

struct Dataset {
  Tensor features;  // N x C x H x W
  std::vector<int> labels;
  std::vector<int> mode_labels;  // empty when the generating mixture is unknown
  std::size_t classes = 0;
};

// Multi-modal Gaussian mixture where every mode owns its own classes, like a
// union of distinct datasets trained under one label space: mode m
// contributes `classes` labels with private templates w_my drawn from
// N(0, template_scale^2), and a sample is
//   w_my + scale_m * noise * n + separation * (u_m - u_bar)
// where n is per-sample standard normal, u_m is the unit vector spread
// uniformly over channel m's spatial positions, and u_bar is the mixture
// average of the u_m, so the population mean is zero like mean-normalized
// inputs. Mode scales are geometrically spaced from 1 to scale_ratio; the
// label space has modes * classes entries. template_scale trades class
// margins against the mode offsets: small templates leave the mode direction
// dominant, which is what lets gating discover modes rather than class
// clusters.
struct SynthConfig {
  std::size_t modes = 2;
  std::size_t classes = 8;  // per mode
  std::size_t train_samples = 8000;
  std::size_t test_samples = 2000;
  std::size_t channels = 4;
  std::size_t height = 2;
  std::size_t width = 2;
  double separation = 6.0;
  double scale_ratio = 2.0;
  double template_scale = 0.55;  // per-entry std of the class templates
  double noise = 0.45;           // per-sample noise floor, scaled per mode
  std::vector<double> mixture;  // empty = uniform; else M nonnegative weights
  std::uint64_t seed = 0;
};

// Same seed, same bytes; the test split continues the train split's stream.
std::pair<Dataset, Dataset> synth_generate(const SynthConfig& cfg);

// IDX decoding: magic 00 00 08 03 yields N x 1 x H x W features scaled to
// [0, 1]; magic 00 00 08 01 yields a length-N label vector. Only the
// unsigned-byte type (0x08) is accepted, payload length must match exactly,
// and gzip streams (leading 0x1F 0x8B) are inflated first.
Tensor idx_parse(const std::vector<unsigned char>& bytes);
Tensor idx_parse_file(const std::string& path);

// Loads <split>-images-idx3-ubyte / <split>-labels-idx1-ubyte (optionally
// .gz) from a directory; split is "train" or "t10k".
Dataset idx_load_split(const std::string& dir, const std::string& split);

std::vector<unsigned char> read_binary_file(const std::string& path);

struct Batch {
  Tensor features;
  std::vector<int> labels;
  std::vector<int> mode_labels;
  std::vector<std::size_t> indices;  // positions in the source dataset
};

// Full permutation per call when shuffling; a short final batch is kept. A
// batch size above the dataset size warns once and yields a single batch.
std::vector<Batch> make_batches(const Dataset& ds, std::size_t batch_size, Rng& rng,
                                bool shuffle);

}  // namespace modenorm
