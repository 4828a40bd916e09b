#include "eegssm/parameters.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "eegssm/errors.hpp"

namespace eegssm {

ParameterSet& ParameterSet::operator=(const ParameterSet& other) {
  if (this == &other) return *this;
  params_ = other.params_;
  index_ = other.index_;
  return *this;
}

Parameter& ParameterSet::add(std::string name, Matrix value, bool trainable) {
  if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
  index_.emplace(name, params_.size());
  Parameter p{std::move(name), std::move(value), Matrix(), trainable};
  p.zero_grad();
  params_.push_back(std::move(p));
  return params_.back();
}

Parameter& ParameterSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return params_[it->second];
}

const Parameter& ParameterSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return params_[it->second];
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

Index ParameterSet::count_trainable() const {
  Index n = 0;
  for (const auto& p : params_)
    if (p.trainable) n += p.value.size();
  return n;
}

void ParameterSet::assign_values(const ParameterSet& other) {
  if (other.size() != size()) throw ShapeError("assign_values: parameter count mismatch");
  for (std::size_t i = 0; i < size(); ++i) {
    if (params_[i].name != other[i].name || params_[i].value.rows() != other[i].value.rows() ||
        params_[i].value.cols() != other[i].value.cols())
      throw ShapeError("assign_values: mismatch at " + params_[i].name);
    params_[i].value = other[i].value;
  }
}

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::filesystem::path with_ext(const std::filesystem::path& stem, const char* ext) {
  auto p = stem;
  p += ext;
  return p;
}

}  // namespace

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& stem) {
  nlohmann::json manifest = nlohmann::json::array();
  std::ofstream bin(with_ext(stem, ".bin"), std::ios::binary);
  if (!bin) throw DataError("cannot write checkpoint " + with_ext(stem, ".bin").string());
  std::uint64_t offset = 0;
  for (const auto& p : params) {
    // Row-major flattening, matching the NdArray convention.
    const RowMajorMatrixX<double> rm = p.value;
    bin.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
    manifest.push_back({{"name", p.name},
                        {"shape", {p.value.rows(), p.value.cols()}},
                        {"dtype", "float64"},
                        {"offset", offset},
                        {"trainable", p.trainable}});
    offset += static_cast<std::uint64_t>(rm.size() * sizeof(double));
  }
  std::ofstream js(with_ext(stem, ".json"));
  js << nlohmann::json{{"byte_order", "little"}, {"total_bytes", offset}, {"arrays", manifest}}.dump(2) << "\n";
}

void load_checkpoint(ParameterSet& params, const std::filesystem::path& stem) {
  std::ifstream js(with_ext(stem, ".json"));
  if (!js) throw DataError("missing checkpoint manifest " + with_ext(stem, ".json").string());
  nlohmann::json manifest;
  try {
    js >> manifest;
  } catch (const std::exception& e) {
    throw DataError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  std::ifstream bin(with_ext(stem, ".bin"), std::ios::binary);
  if (!bin) throw DataError("missing checkpoint body " + with_ext(stem, ".bin").string());
  std::vector<char> body((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  if (body.size() != manifest.at("total_bytes").get<std::size_t>())
    throw DataError("checkpoint body has " + std::to_string(body.size()) + " bytes, manifest expects " +
                    std::to_string(manifest.at("total_bytes").get<std::size_t>()));
  const auto& arrays = manifest.at("arrays");
  if (arrays.size() != params.size()) throw DataError("checkpoint array count does not match model");
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    const auto& a = arrays[i];
    Parameter& p = params.at(a.at("name").get<std::string>());
    const Index rows = a.at("shape")[0].get<Index>();
    const Index cols = a.at("shape")[1].get<Index>();
    if (rows != p.value.rows() || cols != p.value.cols())
      throw DataError("checkpoint shape mismatch for " + p.name);
    RowMajorMatrixX<double> rm(rows, cols);
    std::memcpy(rm.data(), body.data() + a.at("offset").get<std::size_t>(),
                static_cast<std::size_t>(rm.size()) * sizeof(double));
    p.value = rm;
  }
}

}  // namespace eegssm
