#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "kitl/nn/model.hpp"

// Layout: text header lines
//   kitl-checkpoint 1
//   arch <id>
//   embed_dim <d>
//   tensors <count>
//   <name> <rank> <d0> ... <dr-1>     (one line per tensor)
//   end
// followed by the tensors' float32 little-endian payloads in header order.

namespace kitl::nn {
namespace {

constexpr std::string_view kMagic = "kitl-checkpoint";
constexpr int kVersion = 1;
constexpr std::string_view kBufferPrefix = "buffer:";

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
  }
  return v;
}

void write_floats(std::ostream& out, const Tensor<float>& t) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(t.ptr()),
              static_cast<std::streamsize>(t.size() * sizeof(float)));
  } else {
    for (float f : t.data()) {
      const std::uint32_t u = to_little(std::bit_cast<std::uint32_t>(f));
      out.write(reinterpret_cast<const char*>(&u), sizeof u);
    }
  }
}

void read_floats(std::istream& in, Tensor<float>& t, const std::string& name) {
  for (float& f : t.data()) {
    std::uint32_t u = 0;
    if (!in.read(reinterpret_cast<char*>(&u), sizeof u)) {
      throw CheckpointError("checkpoint payload truncated in tensor '" + name + "'");
    }
    f = std::bit_cast<float>(to_little(u));
  }
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const EmbeddingModel& model,
                      const ClassifierHead* head) {
  std::vector<std::pair<std::string, const Tensor<float>*>> index;
  for (const auto& [name, t] : model.params()) index.emplace_back(name, &t);
  for (const auto& [name, t] : model.buffers()) {
    index.emplace_back(std::string(kBufferPrefix) + name, &t);
  }
  if (head) {
    index.emplace_back(std::string(ClassifierHead::kWeightName), &head->weight);
    index.emplace_back(std::string(ClassifierHead::kBiasName), &head->bias);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path.string());
  out << kMagic << ' ' << kVersion << '\n'
      << "arch " << arch_name(model.arch()) << '\n'
      << "embed_dim " << model.embed_dim() << '\n'
      << "tensors " << index.size() << '\n';
  for (const auto& [name, t] : index) {
    out << name << ' ' << t->rank();
    for (std::size_t d : t->shape()) out << ' ' << d;
    out << '\n';
  }
  out << "end\n";
  for (const auto& [name, t] : index) write_floats(out, *t);
  if (!out) throw CheckpointError("failed writing checkpoint: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());

  auto header_line = [&](std::string_view what) {
    std::string line;
    if (!std::getline(in, line)) {
      throw CheckpointError("checkpoint header truncated before " + std::string(what));
    }
    return std::istringstream(line);
  };

  std::string word;
  int version = 0;
  auto magic = header_line("magic");
  if (!(magic >> word >> version) || word != kMagic || version != kVersion) {
    throw CheckpointError("not a kitl checkpoint (bad magic or version): " + path.string());
  }
  std::string arch_id;
  auto arch_line = header_line("arch");
  if (!(arch_line >> word >> arch_id) || word != "arch") {
    throw CheckpointError("checkpoint header: expected 'arch <id>'");
  }
  const Arch arch = parse_arch(arch_id);
  std::size_t dim = 0;
  auto dim_line = header_line("embed_dim");
  if (!(dim_line >> word >> dim) || word != "embed_dim" || dim != embed_dim(arch)) {
    throw CheckpointError("checkpoint header: embed_dim missing or inconsistent with arch");
  }
  std::size_t count = 0;
  auto count_line = header_line("tensors");
  if (!(count_line >> word >> count) || word != "tensors") {
    throw CheckpointError("checkpoint header: expected 'tensors <count>'");
  }

  std::vector<std::pair<std::string, Shape>> index;
  for (std::size_t i = 0; i < count; ++i) {
    auto line = header_line("tensor index");
    std::string name;
    std::size_t rank = 0;
    if (!(line >> name >> rank)) throw CheckpointError("checkpoint header: bad tensor line");
    Shape shape(rank);
    for (auto& d : shape) {
      if (!(line >> d)) throw CheckpointError("checkpoint header: bad extents for '" + name + "'");
    }
    index.emplace_back(std::move(name), std::move(shape));
  }
  auto end_line = header_line("end");
  if (!(end_line >> word) || word != "end") {
    throw CheckpointError("checkpoint header: missing 'end' marker");
  }

  ParamMap params, buffers;
  std::optional<Tensor<float>> head_w, head_b;
  for (auto& [name, shape] : index) {
    Tensor<float> t(shape);
    read_floats(in, t, name);
    if (name.starts_with(kBufferPrefix)) {
      buffers.emplace(name.substr(kBufferPrefix.size()), std::move(t));
    } else if (name == ClassifierHead::kWeightName) {
      head_w = std::move(t);
    } else if (name == ClassifierHead::kBiasName) {
      head_b = std::move(t);
    } else {
      params.emplace(name, std::move(t));
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw CheckpointError("checkpoint has trailing bytes after payload");
  }
  Checkpoint ck{EmbeddingModel(arch, std::move(params), std::move(buffers)), std::nullopt};
  if (head_w.has_value() != head_b.has_value()) {
    throw CheckpointError("checkpoint head is incomplete");
  }
  if (head_w) ck.head = ClassifierHead{std::move(*head_w), std::move(*head_b)};
  return ck;
}

}  // namespace kitl::nn
