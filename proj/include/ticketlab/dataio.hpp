#pragma once

// Datasets (synthetic blobs/shapes + optional IDX/MNIST subset), single-file
// checkpoints with bit-exact round trips, and PGM/PPM image grids.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ticketlab/tensor.hpp"

namespace tl::io {

enum class DatasetKind { blobs2d, shapes16, idx_images };

struct DatasetSpec {
    DatasetKind kind = DatasetKind::shapes16;
    int n_train = 512;
    int n_test = 256;
    std::uint64_t seed = 0;
    std::string idx_images_path;  // idx_images only
    std::string idx_labels_path;
};

struct Dataset {
    TensorPtr images;         // (N, C, H, W), values in [-1, 1]
    std::vector<int> labels;  // empty for blobs2d-without-labels? blobs carry blob index
    int classes = 0;
};

struct DatasetPair {
    Dataset train;
    Dataset test;
};

// Deterministic function of (kind, seed, sizes).
DatasetPair materialize(const DatasetSpec& spec);

// ---- IDX (MNIST format) ----
// images: (n, 1, rows, cols) scaled so byte 0 -> -1.0 and byte 255 -> 1.0
TensorPtr load_idx_images(const std::string& path);
std::vector<int> load_idx_labels(const std::string& path);
void write_idx_images(const std::string& path, const Tensor& images);  // test/tooling writer
void write_idx_labels(const std::string& path, const std::vector<int>& labels);

// ---- checkpoints ----
struct Checkpoint {
    std::uint32_t version = 1;
    std::map<std::string, std::string> meta;                     // config key/values
    std::map<std::string, std::vector<double>> arrays;           // weights, moments, rewinds
    std::map<std::string, std::vector<std::uint8_t>> masks;      // binary mask blobs
    std::map<std::string, std::vector<int>> shapes;              // array name -> shape
    std::int64_t rewind_iteration = -1;
};

struct CorruptionError : std::runtime_error {
    explicit CorruptionError(const std::string& m) : std::runtime_error(m) {}
};
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& m) : std::runtime_error(m) {}
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// ---- image grids (Appendix-style qualitative sheets) ----
// images in [-1,1]; writes binary PGM (C==1) or PPM (C==3) with 1-pixel
// separators at value 255.
void emit_image_grid(const Tensor& images, int columns, const std::string& path);

struct PnmImage {
    int width = 0, height = 0, channels = 1;
    std::vector<std::uint8_t> pixels;  // row-major, interleaved channels
};
PnmImage read_pnm(const std::string& path);

}  // namespace tl::io
