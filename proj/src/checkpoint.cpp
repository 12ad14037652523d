#include "retrostory/checkpoint.h"

#include <cstring>
#include <fstream>

#include <openssl/evp.h>

#include "retrostory/errors.h"
#include "retrostory/image.h"

namespace retrostory {
namespace {

constexpr char kMagic[8] = {'R', 'S', 'T', 'O', 'R', 'Y', 'C', 'K'};
constexpr size_t kDigestBytes = 32;

template <class T>
void put(std::vector<std::uint8_t>& out, T value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T get(const std::vector<std::uint8_t>& in, size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw CheckpointError("checkpoint truncated");
  T value;
  std::memcpy(&value, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

std::vector<std::uint8_t> digest_bytes(const std::uint8_t* data, size_t n) {
  std::vector<std::uint8_t> out(kDigestBytes);
  unsigned int len = 0;
  EVP_Digest(data, n, out.data(), &len, EVP_sha256(), nullptr);
  return out;
}

}  // namespace

void save_archive(const std::filesystem::path& path, const Archive& archive) {
  Json entries = Json::array();
  std::vector<std::uint8_t> payload;
  for (const auto& [name, tensor] : archive.tensors) {
    auto t = tensor.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    entries.push_back({{"name", name},
                       {"shape", t.sizes().vec()},
                       {"offset", payload.size()},
                       {"numel", t.numel()}});
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data_ptr<float>());
    payload.insert(payload.end(), p, p + t.numel() * sizeof(float));
  }
  const Json header = {{"kind", archive.kind},
                       {"config", to_json(archive.config)},
                       {"meta", archive.meta},
                       {"tensors", entries}};
  const std::string header_text = header.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, header_text.size());
  out.insert(out.end(), header_text.begin(), header_text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  const auto digest = digest_bytes(out.data(), out.size());
  out.insert(out.end(), digest.begin(), digest.end());

  // Write to a sibling temp file and rename so readers never see half a file.
  auto tmp = path;
  tmp += ".tmp";
  write_file(tmp, out);
  std::filesystem::rename(tmp, path);
}

Archive load_archive(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file(path);
  } catch (const std::exception& e) {
    throw CheckpointError(e.what());
  }
  const std::string where = " (" + path.string() + ")";
  if (bytes.size() < sizeof(kMagic) + 12 + kDigestBytes ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError("not a retrostory checkpoint" + where);
  size_t pos = sizeof(kMagic);
  const auto version = get<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version " + std::to_string(version) +
                          " is not supported (expected " + std::to_string(kCheckpointVersion) +
                          ")" + where);
  const size_t body = bytes.size() - kDigestBytes;
  const auto expected = digest_bytes(bytes.data(), body);
  if (!std::equal(expected.begin(), expected.end(), bytes.begin() + static_cast<long>(body)))
    throw CheckpointError("checkpoint checksum mismatch, file is corrupted" + where);

  const auto header_len = get<std::uint64_t>(bytes, pos);
  if (pos + header_len > body) throw CheckpointError("checkpoint header truncated" + where);
  Json header;
  try {
    header = Json::parse(bytes.begin() + static_cast<long>(pos),
                         bytes.begin() + static_cast<long>(pos + header_len));
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint header unreadable: ") + e.what() + where);
  }
  pos += header_len;
  const size_t payload_start = pos;
  const size_t payload_len = body - payload_start;

  Archive archive;
  try {
    archive.kind = header.at("kind").get<std::string>();
    archive.config = model_config_from_json(header.at("config"));
    archive.meta = header.at("meta");
    for (const auto& entry : header.at("tensors")) {
      const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = entry.at("offset").get<size_t>();
      const auto numel = entry.at("numel").get<std::int64_t>();
      std::int64_t expected_numel = 1;
      for (auto d : shape) expected_numel *= d;
      if (expected_numel != numel || offset + numel * sizeof(float) > payload_len)
        throw CheckpointError("tensor " + entry.at("name").get<std::string>() +
                              " is out of bounds");
      auto t = torch::empty(shape, torch::kFloat32);
      std::memcpy(t.data_ptr<float>(), bytes.data() + payload_start + offset,
                  static_cast<size_t>(numel) * sizeof(float));
      archive.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
    }
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint header invalid: ") + e.what() + where);
  }
  return archive;
}

void export_module(const torch::nn::Module& module, const std::string& prefix, Archive& archive) {
  for (const auto& item : module.named_parameters(/*recurse=*/true))
    archive.tensors[prefix + item.key()] = item.value().detach().clone();
  for (const auto& item : module.named_buffers(/*recurse=*/true))
    archive.tensors[prefix + item.key()] = item.value().detach().clone();
}

std::vector<std::string> import_module(torch::nn::Module& module, const std::string& prefix,
                                       const Archive& archive, bool strict) {
  std::vector<std::pair<torch::Tensor, const torch::Tensor*>> plan;
  std::vector<std::string> missing;
  auto collect = [&](const std::string& name, torch::Tensor target) {
    auto it = archive.tensors.find(prefix + name);
    if (it == archive.tensors.end()) {
      missing.push_back(name);
      return;
    }
    if (it->second.sizes() != target.sizes()) {
      if (strict)
        throw CheckpointError("shape mismatch for " + prefix + name);
      missing.push_back(name);
      return;
    }
    plan.emplace_back(target, &it->second);
  };
  for (const auto& item : module.named_parameters(true)) collect(item.key(), item.value());
  for (const auto& item : module.named_buffers(true)) collect(item.key(), item.value());
  if (strict && !missing.empty())
    throw CheckpointError("checkpoint is missing " + std::to_string(missing.size()) +
                          " tensors, first: " + prefix + missing.front());
  torch::NoGradGuard no_grad;
  for (auto& [target, source] : plan) target.copy_(*source);
  return missing;
}

void require_config(const Archive& archive, const ModelConfig& expected) {
  const auto diff = config_differences(archive.config, expected);
  if (diff.empty()) return;
  std::string keys;
  for (const auto& k : diff) keys += (keys.empty() ? "" : ", ") + k;
  throw CheckpointError("checkpoint config conflicts with requested config: " + keys);
}

}  // namespace retrostory
