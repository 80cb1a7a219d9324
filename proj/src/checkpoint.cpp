#include "kr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "kr/errors.hpp"

namespace kr {

namespace {

constexpr char kMagic[8] = {'K', 'R', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint64_t kMaxRank = 8;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Writer {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename T>
  void pod(T v) { raw(&v, sizeof v); }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    raw(s.data(), s.size());
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes(b) {}
  void raw(void* p, std::size_t n) {
    if (n > bytes.size() - pos) throw FormatError("checkpoint truncated at byte " + std::to_string(pos));
    std::memcpy(p, bytes.data() + pos, n);
    pos += n;
  }
  template <typename T>
  T pod() {
    T v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    if (n > bytes.size() - pos) throw FormatError("checkpoint string length exceeds file size");
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;
};

void add_velocity(Checkpoint& ckpt, const std::string& prefix, std::span<const Parameter> params,
                  const OptimizerState& opt) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    ckpt.add(prefix + params[i].name, params[i].tensor.shape(), opt.velocity.at(i));
  }
  const double iter = static_cast<double>(opt.iteration);
  ckpt.add(prefix + "iteration", {1}, std::span<const double>(&iter, 1));
}

void restore_velocity(const Checkpoint& ckpt, const std::string& prefix, std::span<const Parameter> params,
                      OptimizerState& opt) {
  opt = OptimizerState::for_parameters(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const NamedTensor* t = ckpt.find(prefix + params[i].name);
    if (!t || t->values.size() != opt.velocity[i].size()) {
      throw FormatError("checkpoint lacks optimizer state for " + params[i].name);
    }
    opt.velocity[i] = t->values;
  }
  const NamedTensor* it = ckpt.find(prefix + "iteration");
  if (!it || it->values.size() != 1) throw FormatError("checkpoint lacks " + prefix + "iteration");
  opt.iteration = static_cast<std::size_t>(it->values[0]);
}

}  // namespace

const NamedTensor* Checkpoint::find(std::string_view name) const {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void Checkpoint::add(std::string name, const Shape& shape, std::span<const double> values) {
  if (shape_numel(shape) != values.size()) throw UsageError("checkpoint tensor " + name + ": shape/value mismatch");
  if (find(name)) throw UsageError("duplicate checkpoint tensor " + name);
  tensors.push_back({std::move(name), shape, std::vector<double>(values.begin(), values.end())});
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.pod<std::uint32_t>(ckpt.version);
  w.pod<std::uint64_t>(ckpt.seed);
  w.pod<std::uint64_t>(ckpt.iteration);
  w.str(ckpt.config);
  w.pod<std::uint64_t>(ckpt.tensors.size());
  for (const NamedTensor& t : ckpt.tensors) {
    w.str(t.name);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.pod<std::uint64_t>(d);
    w.raw(t.values.data(), t.values.size() * sizeof(double));
  }
  w.pod<std::uint64_t>(fnv1a(w.out));
  return std::move(w.out);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw FormatError("not a checkpoint (bad magic)");
  Checkpoint ckpt;
  ckpt.version = r.pod<std::uint32_t>();
  if (ckpt.version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(ckpt.version));
  }
  ckpt.seed = r.pod<std::uint64_t>();
  ckpt.iteration = r.pod<std::uint64_t>();
  ckpt.config = r.str();
  const auto count = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str();
    const auto rank = r.pod<std::uint32_t>();
    if (rank == 0 || rank > kMaxRank) throw FormatError("checkpoint tensor " + t.name + ": bad rank");
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto extent = r.pod<std::uint64_t>();
      if (extent == 0 || extent > (bytes.size() / sizeof(double)) || numel > bytes.size() / extent) {
        throw FormatError("checkpoint tensor " + t.name + ": bad extent");
      }
      numel *= extent;
      t.shape.push_back(static_cast<std::size_t>(extent));
    }
    if (numel * sizeof(double) > bytes.size() - r.pos) throw FormatError("checkpoint truncated in " + t.name);
    t.values.resize(numel);
    r.raw(t.values.data(), numel * sizeof(double));
    ckpt.tensors.push_back(std::move(t));
  }
  const std::size_t body = r.pos;
  const auto stored = r.pod<std::uint64_t>();
  if (stored != fnv1a(bytes.first(body))) throw FormatError("checkpoint checksum mismatch");
  if (r.pos != bytes.size()) throw FormatError("trailing bytes after checkpoint");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void add_parameters(Checkpoint& ckpt, std::span<const Parameter> params) {
  for (const Parameter& p : params) ckpt.add(p.name, p.tensor.shape(), p.tensor.data());
}

void restore_parameters(const Checkpoint& ckpt, std::span<Parameter> params) {
  for (Parameter& p : params) {
    const NamedTensor* t = ckpt.find(p.name);
    if (!t) throw FormatError("checkpoint has no tensor " + p.name);
    if (t->shape != p.tensor.shape()) {
      throw FormatError("checkpoint tensor " + p.name + " has shape " + shape_str(t->shape) + ", expected " +
                        shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    std::copy(t->values.begin(), t->values.end(), dst.begin());
  }
}

Checkpoint capture_distiller(Distiller& distiller, const Network& student, const std::string& config_snapshot) {
  Checkpoint ckpt;
  ckpt.seed = distiller.config().seed;
  ckpt.iteration = distiller.iteration();
  ckpt.config = config_snapshot;
  add_parameters(ckpt, student.parameters());
  const auto agg = distiller.aggregator().parameters();
  add_parameters(ckpt, agg);
  add_velocity(ckpt, "optim.student.", student.parameters(), distiller.student_optimizer());
  add_velocity(ckpt, "optim.agg.", agg, distiller.aggregator().optimizer());
  const auto& eps = distiller.threshold().epsilon;
  ckpt.add("state.epsilon", {eps.size()}, eps);
  return ckpt;
}

void restore_distiller(const Checkpoint& ckpt, Distiller& distiller, Network& student) {
  restore_parameters(ckpt, student.parameters());
  auto agg = distiller.aggregator().parameters();
  restore_parameters(ckpt, agg);
  restore_velocity(ckpt, "optim.student.", student.parameters(), distiller.student_optimizer());
  restore_velocity(ckpt, "optim.agg.", agg, distiller.aggregator().optimizer());
  const NamedTensor* eps = ckpt.find("state.epsilon");
  auto& state = distiller.threshold().epsilon;
  if (!eps || eps->values.size() != state.size()) throw FormatError("checkpoint lacks matching state.epsilon");
  state = eps->values;
  distiller.set_iteration(static_cast<std::size_t>(ckpt.iteration));
}

}  // namespace kr
