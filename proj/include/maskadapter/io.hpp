#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskadapter/adapter.hpp"
#include "maskadapter/extractors.hpp"
#include "maskadapter/masks.hpp"
#include "maskadapter/matching.hpp"
#include "maskadapter/pipeline.hpp"
#include "maskadapter/synthworld.hpp"

namespace maskadapter::io {

namespace fs = std::filesystem;

/// Shortest round-trip decimal for a double.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw std::runtime_error("short write: " + path.string());
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// PGM (binary P5, maxval 255)

inline void write_pgm(const fs::path& path, const std::uint8_t* pixels, int height, int width) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels), static_cast<std::streamsize>(height) * width);
  if (!out) throw std::runtime_error("short write: " + path.string());
}

struct PgmImage {
  int height = 0, width = 0;
  std::vector<std::uint8_t> pixels;
};

inline PgmImage read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5") throw std::runtime_error("not a P5 PGM: " + path.string());
  int width = 0, height = 0, maxval = 0;
  in >> width >> height >> maxval;
  if (width <= 0 || height <= 0 || maxval != 255)
    throw std::runtime_error("unsupported PGM header: " + path.string());
  in.get();  // single whitespace after maxval
  PgmImage img;
  img.height = height;
  img.width = width;
  img.pixels.resize(static_cast<std::size_t>(height) * width);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw std::runtime_error("short read: " + path.string());
  return img;
}

/// One PGM per mask (0 / 255 pixels).
inline void save_mask_pgm(const fs::path& path, BinaryMaskView mask) {
  std::vector<std::uint8_t> px(static_cast<std::size_t>(mask.height) * mask.width);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = mask.data[i] ? 255 : 0;
  write_pgm(path, px.data(), mask.height, mask.width);
}

inline BinaryMask load_mask_pgm(const fs::path& path) {
  const PgmImage img = read_pgm(path);
  BinaryMask mask(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) mask.data[i] = img.pixels[i] > 0 ? 1 : 0;
  return mask;
}

// ---------------------------------------------------------------------------
// Packed-bitset mask batch with JSON sidecar {"n":N,"h":H,"w":W}

/// Row-major bit order; MSB-first within each byte.
inline void save_mask_batch_packed(const fs::path& data_path, const fs::path& sidecar_path,
                                   const BinaryMaskBatch& masks) {
  const std::size_t nbits = masks.data.size();
  std::vector<std::uint8_t> bytes((nbits + 7) / 8, 0);
  for (std::size_t b = 0; b < nbits; ++b)
    if (masks.data[b]) bytes[b / 8] |= static_cast<std::uint8_t>(0x80u >> (b % 8));
  write_file(data_path, std::string(bytes.begin(), bytes.end()));
  nlohmann::json sidecar = {{"n", masks.count}, {"h", masks.height}, {"w", masks.width}};
  write_file(sidecar_path, sidecar.dump());
}

inline BinaryMaskBatch load_mask_batch_packed(const fs::path& data_path,
                                              const fs::path& sidecar_path) {
  const nlohmann::json sidecar = nlohmann::json::parse(read_file(sidecar_path));
  BinaryMaskBatch masks(sidecar.at("n").get<int>(), sidecar.at("h").get<int>(),
                        sidecar.at("w").get<int>());
  const std::string bytes = read_file(data_path);
  const std::size_t nbits = masks.data.size();
  if (bytes.size() != (nbits + 7) / 8)
    throw std::runtime_error("packed mask size mismatch: " + data_path.string());
  for (std::size_t b = 0; b < nbits; ++b)
    masks.data[b] = (static_cast<std::uint8_t>(bytes[b / 8]) >> (7 - b % 8)) & 1u;
  return masks;
}

// ---------------------------------------------------------------------------
// Raw little-endian floats (this implementation assumes a little-endian host)

inline void save_raw_f32(const fs::path& path, const std::vector<double>& values) {
  std::vector<float> f(values.begin(), values.end());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(f.data()),
            static_cast<std::streamsize>(f.size() * sizeof(float)));
}

inline std::vector<double> load_raw_f32(const fs::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  std::vector<float> f(count);
  in.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (!in) throw std::runtime_error("short read: " + path.string());
  return std::vector<double>(f.begin(), f.end());
}

// ---------------------------------------------------------------------------
// Category bank JSON

inline void save_bank_json(const fs::path& path, const CategoryBank& bank) {
  nlohmann::json j;
  j["names"] = bank.names;
  j["seen"] = nlohmann::json::array();
  for (auto f : bank.seen_flags) j["seen"].push_back(static_cast<bool>(f));
  auto protos = nlohmann::json::array();
  for (int i = 0; i < bank.size(); ++i) {
    auto row = nlohmann::json::array();
    for (double v : bank.prototypes.row(i)) row.push_back(v);
    protos.push_back(std::move(row));
  }
  j["prototypes"] = std::move(protos);
  write_file(path, j.dump(2) + "\n");
}

inline CategoryBank load_bank_json(const fs::path& path) {
  const nlohmann::json j = nlohmann::json::parse(read_file(path));
  CategoryBank bank;
  const auto& protos = j.at("prototypes");
  const int L = static_cast<int>(protos.size());
  if (L == 0) throw std::runtime_error("bank has no prototypes: " + path.string());
  const int C = static_cast<int>(protos[0].size());
  bank.prototypes = Matrix(L, C);
  for (int i = 0; i < L; ++i)
    for (int c = 0; c < C; ++c) bank.prototypes.at(i, c) = protos[i][c].get<double>();
  bank.names = j.at("names").get<std::vector<std::string>>();
  for (bool f : j.at("seen").get<std::vector<bool>>()) bank.seen_flags.push_back(f ? 1 : 0);
  return bank;
}

// ---------------------------------------------------------------------------
// Scene directory: features (raw f32 + shape sidecar), label map PGM,
// masks (packed batch), labels JSON

inline void save_scene(const fs::path& dir, const Scene& scene) {
  fs::create_directories(dir);
  save_raw_f32(dir / "features.f32", scene.features.data);
  write_file(dir / "features.json",
             nlohmann::json{{"c", scene.features.channels},
                            {"h", scene.features.height},
                            {"w", scene.features.width}}
                 .dump());
  std::vector<std::uint8_t> labels(scene.label_map.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    labels[i] = static_cast<std::uint8_t>(scene.label_map[i]);
  write_pgm(dir / "label_map.pgm", labels.data(), scene.height, scene.width);
  save_mask_batch_packed(dir / "gt_masks.bits", dir / "gt_masks.json", scene.gt_masks);
  write_file(dir / "scene.json",
             nlohmann::json{{"gt_labels", scene.gt_labels}}.dump());
}

inline Scene load_scene(const fs::path& dir) {
  Scene scene;
  const nlohmann::json shape = nlohmann::json::parse(read_file(dir / "features.json"));
  scene.features.channels = shape.at("c").get<int>();
  scene.features.height = shape.at("h").get<int>();
  scene.features.width = shape.at("w").get<int>();
  scene.features.data = load_raw_f32(dir / "features.f32",
                                     static_cast<std::size_t>(scene.features.channels) *
                                         scene.features.height * scene.features.width);
  const PgmImage labels = read_pgm(dir / "label_map.pgm");
  scene.height = labels.height;
  scene.width = labels.width;
  scene.label_map.assign(labels.pixels.begin(), labels.pixels.end());
  scene.gt_masks = load_mask_batch_packed(dir / "gt_masks.bits", dir / "gt_masks.json");
  scene.gt_labels =
      nlohmann::json::parse(read_file(dir / "scene.json")).at("gt_labels").get<std::vector<int>>();
  return scene;
}

// ---------------------------------------------------------------------------
// CSV exports

inline std::string embeddings_csv(const EmbeddingBatch& embeds) {
  std::string out;
  for (int i = 0; i < embeds.count; ++i) {
    const auto row = embeds.row(i);
    for (int c = 0; c < embeds.channels; ++c) {
      if (c) out += ',';
      out += format_double(row[c]);
    }
    out += '\n';
  }
  return out;
}

inline std::string matchset_csv(const MatchSet& matches) {
  std::string out = "gt_index,pred_index,iou\n";
  for (const MatchPair& p : matches.pairs)
    out += std::to_string(p.gt_index) + "," + std::to_string(p.pred_index) + "," +
           format_double(p.iou) + "\n";
  return out;
}

inline std::string train_log_csv(const TrainLog& log) {
  std::string out = "step,lr,total,ce,cos,n_matches\n";
  for (const StepLog& s : log)
    out += std::to_string(s.step) + "," + format_double(s.lr) + "," + format_double(s.total) +
           "," + format_double(s.ce) + "," + format_double(s.cos) + "," +
           std::to_string(s.n_matches) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Adapter checkpoints: one JSON header line, then raw little-endian float64
// for every tensor in declared order.

struct CheckpointMeta {
  int channels = 0;
  int maps = 0;
  std::uint64_t seed = 0;
  std::string stage;  // "init", "warmup", or "mixed"
  nlohmann::json world;  // world block for downstream commands; may be null
};

inline void save_checkpoint(const fs::path& path, const AdapterParams& params,
                            const CheckpointMeta& meta) {
  auto refs = tensor_refs(const_cast<AdapterParams&>(params));
  nlohmann::json header;
  header["c"] = params.channels;
  header["k"] = params.maps;
  header["seed"] = meta.seed;
  header["stage"] = meta.stage;
  if (!meta.world.is_null()) header["world"] = meta.world;
  auto tensors = nlohmann::json::array();
  for (const auto& r : refs) tensors.push_back({{"name", r.name}, {"shape", r.shape}});
  header["tensors"] = std::move(tensors);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << header.dump() << "\n";
  for (const auto& r : refs)
    out.write(reinterpret_cast<const char*>(r.data->data()),
              static_cast<std::streamsize>(r.data->size() * sizeof(double)));
  if (!out) throw std::runtime_error("short write: " + path.string());
}

inline std::pair<AdapterParams, CheckpointMeta> load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  std::string header_line;
  if (!std::getline(in, header_line))
    throw std::runtime_error("checkpoint missing header: " + path.string());
  const nlohmann::json header = nlohmann::json::parse(header_line);

  CheckpointMeta meta;
  meta.channels = header.at("c").get<int>();
  meta.maps = header.at("k").get<int>();
  meta.seed = header.at("seed").get<std::uint64_t>();
  meta.stage = header.at("stage").get<std::string>();
  if (header.contains("world")) meta.world = header.at("world");

  Rng scratch(0);
  AdapterParams params = init_params(meta.channels, meta.maps, scratch);
  auto refs = tensor_refs(params);
  const auto& tensors = header.at("tensors");
  if (tensors.size() != refs.size())
    throw std::runtime_error("checkpoint tensor count mismatch: " + path.string());
  for (std::size_t t = 0; t < refs.size(); ++t) {
    const auto declared = tensors[t].at("shape").get<std::vector<int>>();
    if (tensors[t].at("name").get<std::string>() != refs[t].name ||
        shape_numel(declared) != refs[t].data->size())
      throw std::runtime_error("checkpoint shape mismatch at " + refs[t].name + ": " +
                               path.string());
    in.read(reinterpret_cast<char*>(refs[t].data->data()),
            static_cast<std::streamsize>(refs[t].data->size() * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint truncated at " + refs[t].name);
  }
  return {std::move(params), std::move(meta)};
}

// ---------------------------------------------------------------------------
// Evaluation report JSON

inline nlohmann::json eval_report_json(const EvalReport& report) {
  nlohmann::json j;
  j["miou"] = report.miou;
  j["miou_seen"] = report.miou_seen;
  j["miou_unseen"] = report.miou_unseen;
  j["per_class_iou"] = report.per_class_iou;
  j["mask_acc"] = report.mask_acc;
  j["mask_acc_perturbed"] = report.mask_acc_perturbed;
  j["scene_count"] = report.scene_count;
  j["gt_mask_count"] = report.gt_mask_count;
  return j;
}

// ---------------------------------------------------------------------------
// Run manifest: every produced file with a content hash

inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct RunManifest {
  std::string command;
  std::string config_path;
  std::uint64_t seed = 0;
  std::string output_dir;
  std::map<std::string, std::string> file_hashes;

  void add_file(const fs::path& root, const fs::path& file) {
    file_hashes[fs::relative(file, root).generic_string()] = fnv1a_hex(read_file(file));
  }
  nlohmann::json to_json() const {
    return {{"command", command},
            {"config_path", config_path},
            {"seed", seed},
            {"output_dir", output_dir},
            {"files", file_hashes}};
  }
};

}  // namespace maskadapter::io
