#include "ktraj/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "ktraj/errors.hpp"

namespace ktraj {

namespace {

constexpr int kSchemaVersion = 1;

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("checkpoint: cannot open " + tmp + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw io_error("checkpoint: short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw io_error("checkpoint: cannot rename " + tmp + " to " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("checkpoint: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

const Tensor& Checkpoint::require(const std::string& name) const {
  const Tensor* t = find(name);
  if (!t) throw io_error("checkpoint: missing tensor '" + name + "'");
  return *t;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  nlohmann::json manifest;
  manifest["schema_version"] = kSchemaVersion;

  std::string blob;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& t : ckpt.tensors) {
    if (t.data.size() != t.count())
      throw argument_error("checkpoint: tensor '" + t.name + "' data does not match shape");
    nlohmann::json row;
    row["name"] = t.name;
    row["shape"] = t.shape;
    row["offset"] = blob.size();
    table.push_back(row);
    const std::size_t nbytes = t.data.size() * sizeof(double);
    const std::size_t at = blob.size();
    blob.resize(at + nbytes);
    std::memcpy(blob.data() + at, t.data.data(), nbytes);
  }
  manifest["tensors"] = table;
  manifest["meta"]["numbers"] = ckpt.meta.numbers;
  manifest["meta"]["strings"] = ckpt.meta.strings;

  write_file_atomic(path + ".bin", blob);
  write_file_atomic(path + ".json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& path) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(path + ".json"));
  } catch (const nlohmann::json::exception& e) {
    throw io_error("checkpoint: bad manifest " + path + ".json: " + e.what());
  }
  if (!manifest.contains("schema_version") ||
      manifest["schema_version"].get<int>() != kSchemaVersion)
    throw io_error("checkpoint: unsupported schema in " + path + ".json");

  const std::string blob = read_file(path + ".bin");

  Checkpoint ckpt;
  try {
    for (const auto& row : manifest["tensors"]) {
      Tensor t;
      t.name = row["name"].get<std::string>();
      t.shape = row["shape"].get<std::vector<std::uint64_t>>();
      const std::uint64_t off = row["offset"].get<std::uint64_t>();
      const std::uint64_t nbytes = t.count() * sizeof(double);
      if (off + nbytes > blob.size())
        throw io_error("checkpoint: tensor '" + t.name + "' overruns " + path + ".bin");
      t.data.resize(t.count());
      std::memcpy(t.data.data(), blob.data() + off, nbytes);
      ckpt.tensors.push_back(std::move(t));
    }
    if (manifest.contains("meta")) {
      const auto& meta = manifest["meta"];
      if (meta.contains("numbers"))
        ckpt.meta.numbers = meta["numbers"].get<std::map<std::string, double>>();
      if (meta.contains("strings"))
        ckpt.meta.strings = meta["strings"].get<std::map<std::string, std::string>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw io_error("checkpoint: malformed manifest " + path + ".json: " + e.what());
  }
  return ckpt;
}

}  // namespace ktraj
