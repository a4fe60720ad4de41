#include "modenorm/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace modenorm {
namespace {

std::uint32_t read_be32(const unsigned char* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

std::vector<unsigned char> gunzip(const std::vector<unsigned char>& in) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 16) != Z_OK)
    throw std::runtime_error("idx: zlib initialization failed");
  std::vector<unsigned char> out(std::max<std::size_t>(in.size() * 4, 1024));
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  std::size_t written = 0;
  int ret = Z_OK;
  while (ret != Z_STREAM_END) {
    if (written == out.size()) out.resize(out.size() * 2);
    zs.next_out = out.data() + written;
    zs.avail_out = static_cast<uInt>(out.size() - written);
    ret = inflate(&zs, Z_NO_FLUSH);
    written = out.size() - zs.avail_out;
    if (ret != Z_OK && ret != Z_STREAM_END) {
      inflateEnd(&zs);
      throw std::runtime_error("idx: gzip decompression failed");
    }
    if (ret == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw std::runtime_error("idx: truncated gzip stream");
    }
  }
  inflateEnd(&zs);
  out.resize(written);
  return out;
}

std::size_t draw_mode(const std::vector<double>& cumulative, Rng& rng) {
  const double u = rng.next_uniform();
  for (std::size_t m = 0; m < cumulative.size(); ++m) {
    if (u <= cumulative[m]) return m;
  }
  return cumulative.size() - 1;
}

bool file_exists(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return f.good();
}

}  // namespace

std::pair<Dataset, Dataset> synth_generate(const SynthConfig& cfg) {
  if (cfg.modes == 0 || cfg.classes == 0)
    throw std::invalid_argument("synth: modes and classes must be nonzero");
  if (cfg.channels == 0 || cfg.height == 0 || cfg.width == 0)
    throw std::invalid_argument("synth: feature dims must be nonzero");
  if (cfg.modes > cfg.channels)
    throw std::invalid_argument("synth: needs modes <= channels for the shift directions");
  if (cfg.train_samples == 0 || cfg.test_samples == 0)
    throw std::invalid_argument("synth: split sizes must be nonzero");
  if (cfg.noise < 0.0) throw std::invalid_argument("synth: noise scale must be nonnegative");
  if (cfg.template_scale < 0.0)
    throw std::invalid_argument("synth: template scale must be nonnegative");

  std::vector<double> mixture = cfg.mixture;
  if (mixture.empty()) mixture.assign(cfg.modes, 1.0 / static_cast<double>(cfg.modes));
  if (mixture.size() != cfg.modes)
    throw std::invalid_argument("synth: mixture must have one weight per mode");
  double total = 0.0;
  for (double w : mixture) {
    if (w < 0.0) throw std::invalid_argument("synth: mixture weights must be nonnegative");
    total += w;
  }
  if (!(total > 0.0)) throw std::invalid_argument("synth: mixture weights sum to zero");
  std::vector<double> cumulative(cfg.modes);
  double acc = 0.0;
  for (std::size_t m = 0; m < cfg.modes; ++m) {
    acc += mixture[m] / total;
    cumulative[m] = acc;
  }
  cumulative.back() = 1.0;

  const std::size_t chw = cfg.channels * cfg.height * cfg.width;
  const std::size_t spatial = cfg.height * cfg.width;
  Rng rng(cfg.seed);

  // Per-(mode, class) templates, drawn once per seed in (mode, class) order.
  std::vector<double> templates(cfg.modes * cfg.classes * chw);
  for (double& v : templates) v = cfg.template_scale * rng.next_normal();

  // Geometric mode scales from 1 to scale_ratio.
  std::vector<double> scales(cfg.modes, 1.0);
  if (cfg.modes > 1) {
    for (std::size_t m = 0; m < cfg.modes; ++m)
      scales[m] = std::pow(cfg.scale_ratio,
                           static_cast<double>(m) / static_cast<double>(cfg.modes - 1));
  }
  // Mode offsets are centered against the mixture so the population mean is zero;
  // pairwise mode-mean distances are unchanged by the centering.
  const double shift = cfg.separation / std::sqrt(static_cast<double>(spatial));
  std::vector<double> offsets(cfg.modes * cfg.modes);
  for (std::size_t m = 0; m < cfg.modes; ++m)
    for (std::size_t j = 0; j < cfg.modes; ++j)
      offsets[m * cfg.modes + j] = shift * ((j == m ? 1.0 : 0.0) - mixture[j] / total);

  auto fill_split = [&](std::size_t count) {
    Dataset ds;
    ds.features = Tensor({count, cfg.channels, cfg.height, cfg.width});
    ds.labels.resize(count);
    ds.mode_labels.resize(count);
    ds.classes = cfg.modes * cfg.classes;
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t m = draw_mode(cumulative, rng);
      const std::size_t y = static_cast<std::size_t>(rng.next_below(cfg.classes));
      ds.labels[i] = static_cast<int>(m * cfg.classes + y);
      ds.mode_labels[i] = static_cast<int>(m);
      double* dst = ds.features.data() + i * chw;
      const double* w = templates.data() + (m * cfg.classes + y) * chw;
      for (std::size_t e = 0; e < chw; ++e)
        dst[e] = w[e] + scales[m] * cfg.noise * rng.next_normal();
      const double* off = offsets.data() + m * cfg.modes;
      for (std::size_t j = 0; j < cfg.modes; ++j)
        for (std::size_t p = 0; p < spatial; ++p) dst[j * spatial + p] += off[j];
    }
    return ds;
  };

  Dataset train = fill_split(cfg.train_samples);
  Dataset test = fill_split(cfg.test_samples);
  return {std::move(train), std::move(test)};
}

Tensor idx_parse(const std::vector<unsigned char>& bytes) {
  if (bytes.size() >= 2 && bytes[0] == 0x1F && bytes[1] == 0x8B) return idx_parse(gunzip(bytes));
  if (bytes.size() < 4) throw std::runtime_error("idx: truncated header");
  if (bytes[0] != 0x00 || bytes[1] != 0x00)
    throw std::runtime_error("idx: bad magic (leading bytes must be zero)");
  if (bytes[2] != 0x08)
    throw std::runtime_error("idx: unsupported type byte 0x" + std::to_string(bytes[2]) +
                             " (only unsigned byte 0x08 is supported)");
  const unsigned ndims = bytes[3];
  if (ndims != 1 && ndims != 3)
    throw std::runtime_error("idx: unsupported dimension count " + std::to_string(ndims));
  const std::size_t header = 4 + 4 * static_cast<std::size_t>(ndims);
  if (bytes.size() < header) throw std::runtime_error("idx: truncated dimension header");

  std::vector<std::size_t> dims(ndims);
  std::size_t payload = 1;
  for (unsigned d = 0; d < ndims; ++d) {
    dims[d] = read_be32(bytes.data() + 4 + 4 * d);
    if (dims[d] == 0) throw std::runtime_error("idx: zero dimension in header");
    payload *= dims[d];
  }
  if (bytes.size() < header + payload) throw std::runtime_error("idx: truncated payload");
  if (bytes.size() > header + payload) throw std::runtime_error("idx: trailing bytes after payload");

  const unsigned char* p = bytes.data() + header;
  if (ndims == 1) {
    Tensor out({dims[0]});
    for (std::size_t i = 0; i < dims[0]; ++i) out[i] = static_cast<double>(p[i]);
    return out;
  }
  Tensor out({dims[0], 1, dims[1], dims[2]});
  // Divide rather than multiply by a reciprocal: b / 255.0 is the correctly
  // rounded pixel value and byte-for-byte reproducible across toolchains.
  for (std::size_t i = 0; i < payload; ++i) out[i] = static_cast<double>(p[i]) / 255.0;
  return out;
}

std::vector<unsigned char> read_binary_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open file: " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(f),
                                    std::istreambuf_iterator<char>());
}

Tensor idx_parse_file(const std::string& path) { return idx_parse(read_binary_file(path)); }

Dataset idx_load_split(const std::string& dir, const std::string& split) {
  auto resolve = [&](const std::string& stem) {
    const std::string plain = dir + "/" + stem;
    if (file_exists(plain)) return plain;
    if (file_exists(plain + ".gz")) return plain + ".gz";
    throw std::runtime_error("idx: missing " + plain + "[.gz]");
  };

  Tensor images = idx_parse_file(resolve(split + "-images-idx3-ubyte"));
  Tensor labels = idx_parse_file(resolve(split + "-labels-idx1-ubyte"));
  if (labels.rank() != 1 || images.rank() != 4)
    throw std::runtime_error("idx: image/label files swapped or malformed");
  if (labels.shape()[0] != images.shape()[0])
    throw std::runtime_error("idx: image/label counts differ");

  Dataset ds;
  ds.features = images;
  ds.labels.resize(labels.size());
  int max_label = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ds.labels[i] = static_cast<int>(labels[i]);
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.classes = static_cast<std::size_t>(max_label) + 1;
  return ds;
}

std::vector<Batch> make_batches(const Dataset& ds, std::size_t batch_size, Rng& rng,
                                bool shuffle) {
  const std::size_t n = ds.features.shape()[0];
  if (batch_size == 0) throw std::invalid_argument("batches: batch size must be nonzero");
  if (batch_size > n) {
    std::fprintf(stderr, "warning: batch size %zu exceeds dataset size %zu; using one batch\n",
                 batch_size, n);
    batch_size = n;
  }

  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  if (shuffle) {
    for (std::size_t i = n; i-- > 1;) {
      const std::size_t j = static_cast<std::size_t>(rng.next_below(i + 1));
      std::swap(perm[i], perm[j]);
    }
  }

  const std::size_t sample = ds.features.size() / n;
  const Shape& fs = ds.features.shape();
  std::vector<Batch> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t b = std::min(batch_size, n - start);
    Batch batch;
    batch.features = Tensor({b, fs[1], fs[2], fs[3]});
    batch.labels.resize(b);
    batch.indices.resize(b);
    if (!ds.mode_labels.empty()) batch.mode_labels.resize(b);
    for (std::size_t i = 0; i < b; ++i) {
      const std::size_t src = perm[start + i];
      batch.indices[i] = src;
      batch.labels[i] = ds.labels[src];
      if (!ds.mode_labels.empty()) batch.mode_labels[i] = ds.mode_labels[src];
      std::copy(ds.features.data() + src * sample, ds.features.data() + (src + 1) * sample,
                batch.features.data() + i * sample);
    }
    out.push_back(std::move(batch));
  }
  return out;
}

}  // namespace modenorm
