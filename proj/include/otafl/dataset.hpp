#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "otafl/common.hpp"

namespace otafl {

/// Row-major sample storage. Single precision keeps the 60k x 784 MNIST
/// training set under 200 MB; all arithmetic on it is promoted to double.
using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Dataset {
  FeatureMatrix features;  // N x d_f, entries in [0, 1] for image data
  std::vector<int> labels;
  int classes = 10;

  std::size_t size() const { return labels.size(); }
  std::size_t feature_dim() const { return static_cast<std::size_t>(features.cols()); }

  void validate() const {
    require(!labels.empty(), "dataset must hold at least one sample");
    require(static_cast<std::size_t>(features.rows()) == labels.size(),
            "feature rows and label count differ");
    require(classes >= 1, "class count must be positive");
    for (int y : labels) require(y >= 0 && y < classes, "label outside [0, classes)");
    require(features.allFinite(), "non-finite feature value");
  }

  /// Number of samples per label.
  std::vector<std::size_t> label_histogram() const {
    std::vector<std::size_t> h(static_cast<std::size_t>(classes), 0);
    for (int y : labels) ++h[static_cast<std::size_t>(y)];
    return h;
  }
};

enum class IdxErrorKind { io, bad_magic, truncated, count_mismatch, invalid_label };

class IdxError : public std::runtime_error {
 public:
  IdxError(IdxErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  IdxErrorKind kind() const noexcept { return kind_; }

 private:
  IdxErrorKind kind_;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset) {
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

}  // namespace detail

/// Reads an IDX image/label file pair (MNIST layout: big-endian header, raw
/// unsigned bytes). Pixels are scaled by 1/255. Nothing is returned unless both
/// files are complete and consistent.
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path, int classes = 10) {
  const auto images = detail::read_file(images_path);
  const auto labels = detail::read_file(labels_path);

  if (images.size() < 16) throw IdxError(IdxErrorKind::truncated, images_path.string() + ": header truncated");
  if (labels.size() < 8) throw IdxError(IdxErrorKind::truncated, labels_path.string() + ": header truncated");

  const std::uint32_t image_magic = detail::read_be32(images, 0);
  const std::uint32_t label_magic = detail::read_be32(labels, 0);
  if (image_magic != kIdxImageMagic)
    throw IdxError(IdxErrorKind::bad_magic, images_path.string() + ": not an IDX image file");
  if (label_magic != kIdxLabelMagic)
    throw IdxError(IdxErrorKind::bad_magic, labels_path.string() + ": not an IDX label file");

  const std::size_t n_images = detail::read_be32(images, 4);
  const std::size_t rows = detail::read_be32(images, 8);
  const std::size_t cols = detail::read_be32(images, 12);
  const std::size_t n_labels = detail::read_be32(labels, 4);
  const std::size_t pixels = rows * cols;

  if (images.size() < 16 + n_images * pixels)
    throw IdxError(IdxErrorKind::truncated, images_path.string() + ": pixel data truncated");
  if (labels.size() < 8 + n_labels)
    throw IdxError(IdxErrorKind::truncated, labels_path.string() + ": label data truncated");
  if (n_images != n_labels)
    throw IdxError(IdxErrorKind::count_mismatch,
                   "image count " + std::to_string(n_images) + " != label count " + std::to_string(n_labels));
  if (n_images == 0) throw IdxError(IdxErrorKind::count_mismatch, "IDX files hold no samples");

  Dataset ds;
  ds.classes = classes;
  ds.features.resize(static_cast<Eigen::Index>(n_images), static_cast<Eigen::Index>(pixels));
  const unsigned char* px = images.data() + 16;
  for (std::size_t n = 0; n < n_images; ++n)
    for (std::size_t j = 0; j < pixels; ++j)
      ds.features(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(j)) =
          static_cast<float>(px[n * pixels + j]) / 255.0f;

  ds.labels.resize(n_labels);
  for (std::size_t n = 0; n < n_labels; ++n) {
    const int y = labels[8 + n];
    if (y >= classes)
      throw IdxError(IdxErrorKind::invalid_label, labels_path.string() + ": label " + std::to_string(y) +
                                                      " at index " + std::to_string(n) + " >= class count");
    ds.labels[n] = y;
  }
  return ds;
}

/// Standard MNIST file names inside `dir`. `train` selects the 60k split.
inline Dataset load_mnist(const std::filesystem::path& dir, bool train) {
  const std::string prefix = train ? "train" : "t10k";
  return load_idx(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"));
}

/// Per-client index lists into a parent Dataset plus the aggregation weights
/// alpha_i = |D_i| / sum_j |D_j|.
struct ClientPartition {
  std::vector<std::vector<std::size_t>> indices;
  std::vector<double> alpha;

  std::size_t clients() const { return indices.size(); }

  static std::vector<double> weights_from_sizes(const std::vector<std::vector<std::size_t>>& lists) {
    std::size_t total = 0;
    for (const auto& l : lists) total += l.size();
    require(total > 0, "partition holds no samples");
    std::vector<double> alpha;
    alpha.reserve(lists.size());
    for (const auto& l : lists) alpha.push_back(static_cast<double>(l.size()) / static_cast<double>(total));
    return alpha;
  }
};

}  // namespace otafl
