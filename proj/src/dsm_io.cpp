#include "scvamp/dsm.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <stdexcept>
#include <string>

namespace scvamp {

namespace {
using nlohmann::json;

[[noreturn]] void fail(const std::string& what) {
  throw std::runtime_error("load_weights: " + what);
}
}  // namespace

MlpScoreNet load_weights(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) fail("cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::exception& e) {
    fail("malformed file: " + std::string(e.what()));
  }
  if (!doc.contains("format_version") || !doc["format_version"].is_number_integer())
    fail("missing format_version");
  if (doc["format_version"].get<int>() != 1)
    fail("unsupported format_version " + doc["format_version"].dump());
  if (!doc.contains("activation") || doc["activation"] != "softplus")
    fail("unsupported activation");
  if (!doc.contains("arch") || !doc["arch"].is_array() || doc["arch"].size() < 2)
    fail("missing or invalid arch");

  MlpScoreNet net;
  net.arch.clear();
  for (const auto& w : doc["arch"]) net.arch.push_back(w.get<int>());
  net.init_seed = doc.value("seed", std::uint64_t{0});
  net.init_kind = doc.value("init", std::string{"unknown"});

  if (!doc.contains("layers") || !doc["layers"].is_array()) fail("missing layers");
  const auto& layers = doc["layers"];
  if (layers.size() + 1 != net.arch.size())
    fail("layer count " + std::to_string(layers.size()) + " does not match arch");

  net.weights.clear();
  net.biases.clear();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const int rows = net.arch[l + 1];
    const int cols = net.arch[l];
    const auto& layer = layers[l];
    if (!layer.contains("weights") || !layer.contains("biases"))
      fail("layer " + std::to_string(l) + ": missing weights or biases");
    const auto& w = layer["weights"];
    const auto& b = layer["biases"];
    if (static_cast<int>(w.size()) != rows * cols)
      fail("layer " + std::to_string(l) + ": expected " + std::to_string(rows * cols) +
           " weights for " + std::to_string(rows) + "x" + std::to_string(cols) + ", got " +
           std::to_string(w.size()));
    if (static_cast<int>(b.size()) != rows)
      fail("layer " + std::to_string(l) + ": expected " + std::to_string(rows) +
           " biases, got " + std::to_string(b.size()));
    Matrix weight(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j)
        weight(i, j) = w[static_cast<std::size_t>(i) * cols + j].get<double>();
    Vector bias(rows);
    for (int i = 0; i < rows; ++i) bias[i] = b[static_cast<std::size_t>(i)].get<double>();
    net.weights.push_back(std::move(weight));
    net.biases.push_back(std::move(bias));
  }
  return net;
}

}  // namespace scvamp
