#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "kitl/datapipe/datapipe.hpp"

namespace kitl::data {
namespace {

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.empty()) throw DataError(path.string() + ": file is empty");
  return bytes;
}

std::uint32_t big_u32(const std::vector<unsigned char>& b, std::size_t offset,
                      const std::filesystem::path& path) {
  if (offset + 4 > b.size()) {
    throw DataError(path.string() + ": truncated header at offset " + std::to_string(offset));
  }
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) |
         (std::uint32_t{b[offset + 2]} << 8) | std::uint32_t{b[offset + 3]};
}

std::uint32_t little_u32(const unsigned char* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
         (std::uint32_t{p[3]} << 24);
}

void put_little_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::filesystem::path labels_path_for(const std::filesystem::path& images) {
  std::string name = images.filename().string();
  const auto pos = name.find("images-idx3");
  if (pos == std::string::npos) {
    throw DataError(images.string() + ": cannot derive labels file (expected 'images-idx3' in name)");
  }
  name.replace(pos, 11, "labels-idx1");
  return images.parent_path() / name;
}

Dataset concat(std::string name, const Dataset& a, const Dataset& b) {
  if (a.input_shape != b.input_shape) {
    throw DataError("cannot concatenate datasets with shapes " + shape_str(a.input_shape) +
                    " and " + shape_str(b.input_shape));
  }
  Shape shape = a.features.shape();
  shape[0] += b.size();
  std::vector<float> values(a.features.data().begin(), a.features.data().end());
  values.insert(values.end(), b.features.data().begin(), b.features.data().end());
  std::vector<int> labels = a.labels;
  labels.insert(labels.end(), b.labels.begin(), b.labels.end());
  return make_dataset(std::move(name), Tensor<float>(shape, values), std::move(labels));
}

}  // namespace

Tensor<float> Dataset::gather(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw DataError(name + ": gather of an empty index list");
  Shape shape = features.shape();
  shape[0] = indices.size();
  Tensor<float> out(shape);
  const std::size_t width = features.row_width();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) {
      throw DataError(name + ": instance index " + std::to_string(indices[i]) + " out of range");
    }
    std::memcpy(out.ptr() + i * width, features.ptr() + indices[i] * width, width * sizeof(float));
  }
  return out;
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset make_dataset(std::string name, Tensor<float> features, std::vector<int> labels) {
  if (features.rank() < 2 || features.dim(0) != labels.size()) {
    throw DataError(name + ": need one label per instance, got features " +
                    shape_str(features.shape()) + " and " + std::to_string(labels.size()) +
                    " labels");
  }
  Dataset ds;
  ds.name = std::move(name);
  ds.input_shape.assign(features.shape().begin() + 1, features.shape().end());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw DataError(ds.name + ": negative label at instance " + std::to_string(i));
    ds.classes[labels[i]].push_back(i);
  }
  for (const auto& [c, members] : ds.classes) ds.groups[c] = c;
  ds.features = std::move(features);
  ds.labels = std::move(labels);
  return ds;
}

Format parse_format(std::string_view name) {
  if (name == "idx") return Format::idx;
  if (name == "csv") return Format::csv;
  if (name == "kitl") return Format::kitl;
  throw DataError("unknown data format '" + std::string(name) + "' (expected idx, csv or kitl)");
}

Dataset read_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = read_bytes(images);
  const std::uint32_t img_magic = big_u32(img, 0, images);
  if (img_magic != 0x00000803) {
    std::ostringstream msg;
    msg << images.string() << ": bad magic 0x" << std::hex << img_magic
        << " at offset 0 (expected 0x00000803)";
    throw DataError(msg.str());
  }
  const std::size_t count = big_u32(img, 4, images);
  const std::size_t rows = big_u32(img, 8, images);
  const std::size_t cols = big_u32(img, 12, images);
  const std::size_t expected = 16 + count * rows * cols;
  if (count == 0 || rows == 0 || cols == 0 || img.size() != expected) {
    throw DataError(images.string() + ": payload ends at offset " + std::to_string(img.size()) +
                    ", header implies " + std::to_string(expected));
  }

  const auto lab = read_bytes(labels);
  const std::uint32_t lab_magic = big_u32(lab, 0, labels);
  if (lab_magic != 0x00000801) {
    std::ostringstream msg;
    msg << labels.string() << ": bad magic 0x" << std::hex << lab_magic
        << " at offset 0 (expected 0x00000801)";
    throw DataError(msg.str());
  }
  const std::size_t lab_count = big_u32(lab, 4, labels);
  if (lab_count != count) {
    throw DataError(labels.string() + ": offset 4: " + std::to_string(lab_count) +
                    " labels for " + std::to_string(count) + " images");
  }
  if (lab.size() != 8 + count) {
    throw DataError(labels.string() + ": payload ends at offset " + std::to_string(lab.size()) +
                    ", header implies " + std::to_string(8 + count));
  }

  Tensor<float> features({count, rows, cols, 1});
  for (std::size_t i = 0; i < count * rows * cols; ++i) features[i] = img[16 + i] / 255.0f;
  std::vector<int> y(count);
  for (std::size_t i = 0; i < count; ++i) y[i] = lab[8 + i];
  return make_dataset(images.stem().string(), std::move(features), std::move(y));
}

Dataset read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<float> values;
  std::vector<int> labels;
  std::size_t width = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<double> fields;
    std::size_t start = 0;
    while (start <= line.size()) {
      std::size_t end = line.find(',', start);
      if (end == std::string::npos) end = line.size();
      std::string_view cell(line.data() + start, end - start);
      while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
      while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t')) cell.remove_suffix(1);
      double v = 0;
      auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size()) {
        throw DataError(path.string() + ":" + std::to_string(line_no) + ": column " +
                        std::to_string(fields.size() + 1) + " is not a number: '" +
                        std::string(cell) + "'");
      }
      fields.push_back(v);
      start = end + 1;
    }
    if (fields.size() < 2) {
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": need feature columns and a label column");
    }
    if (width == 0) width = fields.size() - 1;
    if (fields.size() - 1 != width) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(width + 1) + " columns, found " +
                      std::to_string(fields.size()));
    }
    const double label = fields.back();
    if (label != std::floor(label) || label < 0) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": label " +
                      std::to_string(label) + " is not a non-negative integer");
    }
    for (std::size_t j = 0; j < width; ++j) values.push_back(static_cast<float>(fields[j]));
    labels.push_back(static_cast<int>(label));
  }
  if (labels.empty()) throw DataError(path.string() + ": file is empty");
  Tensor<float> features({labels.size(), width}, values);
  return make_dataset(path.stem().string(), std::move(features), std::move(labels));
}

Dataset read_kitl(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  if (bytes.size() < 8 || std::memcmp(bytes.data(), "KITL", 4) != 0) {
    throw DataError(path.string() + ": bad magic at offset 0 (expected 'KITL')");
  }
  const std::size_t rank = little_u32(bytes.data() + 4);
  if (rank < 2 || bytes.size() < 8 + 4 * rank) {
    throw DataError(path.string() + ": offset 4: invalid rank " + std::to_string(rank));
  }
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i) shape[i] = little_u32(bytes.data() + 8 + 4 * i);
  const std::size_t header = 8 + 4 * rank;
  const std::size_t numel = shape_numel(shape);
  if (numel == 0 || bytes.size() != header + 4 * numel) {
    throw DataError(path.string() + ": payload ends at offset " + std::to_string(bytes.size()) +
                    ", header implies " + std::to_string(header + 4 * numel));
  }
  Tensor<float> features(shape);
  for (std::size_t i = 0; i < numel; ++i) {
    features[i] = std::bit_cast<float>(little_u32(bytes.data() + header + 4 * i));
  }

  auto label_path = path;
  label_path.replace_extension(".labels");
  const auto lab = read_bytes(label_path);
  if (lab.size() != 4 * shape[0]) {
    throw DataError(label_path.string() + ": holds " + std::to_string(lab.size()) +
                    " bytes, expected " + std::to_string(4 * shape[0]));
  }
  std::vector<int> labels(shape[0]);
  for (std::size_t i = 0; i < shape[0]; ++i) {
    labels[i] = static_cast<std::int32_t>(little_u32(lab.data() + 4 * i));
  }
  return make_dataset(path.stem().string(), std::move(features), std::move(labels));
}

void write_kitl(const std::filesystem::path& path, const Dataset& dataset) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write("KITL", 4);
    put_little_u32(out, static_cast<std::uint32_t>(dataset.features.rank()));
    for (std::size_t d : dataset.features.shape()) put_little_u32(out, static_cast<std::uint32_t>(d));
    for (float f : dataset.features.data()) put_little_u32(out, std::bit_cast<std::uint32_t>(f));
    if (!out) throw DataError("failed writing " + path.string());
  }
  auto label_path = path;
  label_path.replace_extension(".labels");
  std::ofstream out(label_path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + label_path.string());
  for (int y : dataset.labels) put_little_u32(out, static_cast<std::uint32_t>(y));
  if (!out) throw DataError("failed writing " + label_path.string());
}

Dataset ingest(const std::filesystem::path& path, Format format) {
  switch (format) {
    case Format::idx: {
      if (std::filesystem::is_directory(path)) {
        auto train = read_idx(path / "train-images-idx3-ubyte", path / "train-labels-idx1-ubyte");
        const auto test_images = path / "t10k-images-idx3-ubyte";
        if (!std::filesystem::exists(test_images)) {
          train.name = path.filename().string();
          return train;
        }
        auto test = read_idx(test_images, path / "t10k-labels-idx1-ubyte");
        return concat(path.filename().string(), train, test);
      }
      return read_idx(path, labels_path_for(path));
    }
    case Format::csv: return read_csv(path);
    case Format::kitl: return read_kitl(path);
  }
  throw DataError("unhandled format");
}

void rotate90(std::span<const float> in, std::span<float> out, std::size_t side,
              std::size_t channels) {
  // out(y, x) = in(x, side - 1 - y)
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const float* src = in.data() + (x * side + (side - 1 - y)) * channels;
      float* dst = out.data() + (y * side + x) * channels;
      std::copy(src, src + channels, dst);
    }
  }
}

Dataset augment_rotations(const Dataset& dataset) {
  const Shape& s = dataset.input_shape;
  if (s.size() != 3 || s[0] != s[1]) {
    throw DataError(dataset.name + ": rotation needs square HWC images, got " + shape_str(s));
  }
  const std::size_t n = dataset.size();
  const std::size_t width = dataset.features.row_width();
  Shape shape = dataset.features.shape();
  shape[0] = 4 * n;
  Tensor<float> features(shape);
  std::vector<int> labels(4 * n);
  std::copy(dataset.features.data().begin(), dataset.features.data().end(), features.ptr());
  for (std::size_t r = 1; r < 4; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      std::span<const float> src(features.ptr() + ((r - 1) * n + i) * width, width);
      std::span<float> dst(features.ptr() + (r * n + i) * width, width);
      rotate90(src, dst, s[0], s[2]);
    }
  }
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      labels[r * n + i] = 4 * dataset.labels[i] + static_cast<int>(r);
    }
  }
  Dataset out = make_dataset(dataset.name, std::move(features), std::move(labels));
  for (auto& [c, g] : out.groups) g = dataset.groups.at(c / 4);
  return out;
}

}  // namespace kitl::data
