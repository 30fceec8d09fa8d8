#include "dhn/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace dhn {

namespace pt = boost::property_tree;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    parts.push_back(trim(s.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw std::invalid_argument("config key " + key + ": cannot parse '" + text + "'");
  }
  return value;
}

template <typename T>
std::string format_number(T v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  for (const auto& p : split(text, ',')) out.push_back(parse_number<T>(key, p));
  return out;
}

template <typename T>
std::string format_list(const std::vector<T>& v, char sep = ',') {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += sep;
    s += format_number(v[i]);
  }
  return s;
}

struct Field {
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T, typename Access>
Field number(Access access) {
  return {[access](RunConfig& c, const std::string& k, const std::string& v) { access(c) = parse_number<T>(k, v); },
          [access](const RunConfig& c) { return format_number(access(const_cast<RunConfig&>(c))); }};
}

// Ordered so that to_ini emits a stable, readable layout.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> f;
    auto num_d = [&](const std::string& key, auto access) { f.emplace_back(key, number<double>(access)); };
    auto num_i = [&](const std::string& key, auto access) { f.emplace_back(key, number<int>(access)); };
    auto num_u = [&](const std::string& key, auto access) { f.emplace_back(key, number<std::uint64_t>(access)); };
    auto num_x = [&](const std::string& key, auto access) { f.emplace_back(key, number<Index>(access)); };

    f.emplace_back("data.dir", Field{[](RunConfig& c, const std::string&, const std::string& v) { c.data.dir = v; },
                                     [](const RunConfig& c) { return c.data.dir.string(); }});
    num_u("data.seed", [](RunConfig& c) -> auto& { return c.data.seed; });
    num_i("data.n_patients", [](RunConfig& c) -> auto& { return c.data.n_patients; });
    num_i("data.scans_per_patient", [](RunConfig& c) -> auto& { return c.data.scans_per_patient; });
    f.emplace_back("data.image_size",
                   Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                           c.data.synth.height = c.data.synth.width = c.model.image_size = parse_number<Index>(k, v);
                         },
                         [](const RunConfig& c) { return format_number(c.model.image_size); }});
    num_d("data.nodule_prob", [](RunConfig& c) -> auto& { return c.data.synth.nodule_prob; });
    num_i("data.max_nodules", [](RunConfig& c) -> auto& { return c.data.synth.max_nodules; });
    num_d("data.contrast_min", [](RunConfig& c) -> auto& { return c.data.synth.contrast_min; });
    num_d("data.contrast_max", [](RunConfig& c) -> auto& { return c.data.synth.contrast_max; });
    num_i("data.occluder_count", [](RunConfig& c) -> auto& { return c.data.synth.occluder_count; });
    num_d("data.rib_amplitude", [](RunConfig& c) -> auto& { return c.data.synth.rib_amplitude; });
    num_d("data.noise_sigma", [](RunConfig& c) -> auto& { return c.data.synth.noise_sigma; });
    num_d("data.radius_min", [](RunConfig& c) -> auto& { return c.data.synth.radius_min; });
    num_d("data.radius_max", [](RunConfig& c) -> auto& { return c.data.synth.radius_max; });
    num_d("data.occluded_fraction", [](RunConfig& c) -> auto& { return c.data.synth.occluded_fraction; });

    num_x("model.stem_width", [](RunConfig& c) -> auto& { return c.model.stem_width; });
    f.emplace_back("model.stage_widths",
                   Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                           const auto w = parse_list<Index>(k, v);
                           if (w.size() != 3) throw std::invalid_argument("config key " + k + ": expected 3 widths");
                           std::copy(w.begin(), w.end(), c.model.stage_widths.begin());
                         },
                         [](const RunConfig& c) {
                           return format_list(std::vector<Index>(c.model.stage_widths.begin(), c.model.stage_widths.end()));
                         }});
    num_i("model.deformable_stages", [](RunConfig& c) -> auto& { return c.model.deformable_stages; });
    num_x("model.fpn_width", [](RunConfig& c) -> auto& { return c.model.fpn_width; });
    num_x("model.global_width", [](RunConfig& c) -> auto& { return c.model.global_width; });
    num_x("model.roi_hidden", [](RunConfig& c) -> auto& { return c.model.roi_hidden; });
    num_x("model.roi_pool", [](RunConfig& c) -> auto& { return c.model.roi_pool; });
    f.emplace_back("model.anchor_sizes",
                   Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                           c.model.anchor_sizes.clear();
                           for (const auto& level : split(v, ';')) c.model.anchor_sizes.push_back(parse_list<double>(k, level));
                         },
                         [](const RunConfig& c) {
                           std::string s;
                           for (std::size_t i = 0; i < c.model.anchor_sizes.size(); ++i) {
                             if (i) s += ';';
                             s += format_list(c.model.anchor_sizes[i]);
                           }
                           return s;
                         }});
    f.emplace_back("model.anchor_ratios",
                   Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                           c.model.anchor_ratios = parse_list<double>(k, v);
                         },
                         [](const RunConfig& c) { return format_list(c.model.anchor_ratios); }});
    num_d("model.rpn_fg_iou", [](RunConfig& c) -> auto& { return c.model.rpn_fg_iou; });
    num_d("model.rpn_bg_iou", [](RunConfig& c) -> auto& { return c.model.rpn_bg_iou; });
    num_i("model.rpn_batch", [](RunConfig& c) -> auto& { return c.model.rpn_batch; });
    num_d("model.rpn_positive_fraction", [](RunConfig& c) -> auto& { return c.model.rpn_positive_fraction; });
    num_i("model.rpn_pre_nms_train", [](RunConfig& c) -> auto& { return c.model.rpn_pre_nms_train; });
    num_i("model.rpn_post_nms_train", [](RunConfig& c) -> auto& { return c.model.rpn_post_nms_train; });
    num_i("model.rpn_pre_nms_test", [](RunConfig& c) -> auto& { return c.model.rpn_pre_nms_test; });
    num_i("model.rpn_post_nms_test", [](RunConfig& c) -> auto& { return c.model.rpn_post_nms_test; });
    num_d("model.rpn_nms", [](RunConfig& c) -> auto& { return c.model.rpn_nms; });
    num_d("model.roi_fg_iou", [](RunConfig& c) -> auto& { return c.model.roi_fg_iou; });
    num_i("model.roi_batch", [](RunConfig& c) -> auto& { return c.model.roi_batch; });
    num_d("model.roi_positive_fraction", [](RunConfig& c) -> auto& { return c.model.roi_positive_fraction; });
    num_d("model.roi_score_threshold", [](RunConfig& c) -> auto& { return c.model.roi_score_threshold; });
    num_d("model.roi_nms", [](RunConfig& c) -> auto& { return c.model.roi_nms; });
    num_i("model.detections_per_image", [](RunConfig& c) -> auto& { return c.model.detections_per_image; });

    num_d("train.lr", [](RunConfig& c) -> auto& { return c.train.lr; });
    num_d("train.momentum", [](RunConfig& c) -> auto& { return c.train.momentum; });
    num_d("train.clip_norm", [](RunConfig& c) -> auto& { return c.train.clip_norm; });
    num_i("train.epochs", [](RunConfig& c) -> auto& { return c.train.epochs; });
    num_i("train.batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; });
    num_i("train.checkpoint_every", [](RunConfig& c) -> auto& { return c.train.checkpoint_every; });
    num_u("train.seed", [](RunConfig& c) -> auto& { return c.train.seed; });
    f.emplace_back("train.phi_g", Field{[](RunConfig& c, const std::string&, const std::string& v) {
                                          c.train.phi_g = AugStrategy::parse(v);
                                        },
                                        [](const RunConfig& c) { return c.train.phi_g.str(); }});
    f.emplace_back("train.phi_l", Field{[](RunConfig& c, const std::string&, const std::string& v) {
                                          c.train.phi_l = AugStrategy::parse(v);
                                        },
                                        [](const RunConfig& c) { return c.train.phi_l.str(); }});
    num_d("train.alpha1", [](RunConfig& c) -> auto& { return c.train.weights.alpha1; });
    num_d("train.alpha2", [](RunConfig& c) -> auto& { return c.train.weights.alpha2; });
    num_d("train.lambda1", [](RunConfig& c) -> auto& { return c.train.weights.lambda1; });
    num_d("train.lambda2", [](RunConfig& c) -> auto& { return c.train.weights.lambda2; });

    num_d("eval.iou_threshold", [](RunConfig& c) -> auto& { return c.eval.iou_threshold; });
    num_d("eval.fppi_max", [](RunConfig& c) -> auto& { return c.eval.fppi_max; });
    num_u("eval.topk", [](RunConfig& c) -> auto& { return c.eval.topk; });
    f.emplace_back("eval.selection_metric",
                   Field{[](RunConfig& c, const std::string&, const std::string& v) { c.eval.selection_metric = v; },
                         [](const RunConfig& c) { return c.eval.selection_metric; }});

    f.emplace_back("ablation.cells",
                   Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                           c.ablation.cells.clear();
                           for (const auto& cell : split(v, ';')) {
                             const auto pair = split(cell, '/');
                             if (pair.size() != 2) {
                               throw std::invalid_argument("config key " + k + ": cell '" + cell +
                                                           "' must read <phi_g>/<phi_l>");
                             }
                             c.ablation.cells.emplace_back(AugStrategy::parse(pair[0]), AugStrategy::parse(pair[1]));
                           }
                         },
                         [](const RunConfig& c) {
                           std::string s;
                           for (std::size_t i = 0; i < c.ablation.cells.size(); ++i) {
                             if (i) s += ';';
                             s += c.ablation.cells[i].first.str() + "/" + c.ablation.cells[i].second.str();
                           }
                           return s;
                         }});
    f.emplace_back("ablation.seeds", Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                                             c.ablation.seeds = parse_list<std::uint64_t>(k, v);
                                           },
                                           [](const RunConfig& c) { return format_list(c.ablation.seeds); }});
    return f;
  }();
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& [name, field] : fields()) {
    if (name == key) return &field;
  }
  return nullptr;
}

}  // namespace

void RunConfig::validate() const {
  data.synth.validate();
  model.validate();
  train.weights.validate();
  if (data.n_patients < 10) throw std::invalid_argument("data.n_patients must be at least 10");
  if (data.scans_per_patient < 1) throw std::invalid_argument("data.scans_per_patient must be at least 1");
  if (train.lr <= 0.0) throw std::invalid_argument("train.lr must be positive");
  if (train.momentum < 0.0 || train.momentum >= 1.0) throw std::invalid_argument("train.momentum must lie in [0,1)");
  if (!(train.clip_norm >= 0.0)) throw std::invalid_argument("train.clip_norm must be non-negative");
  if (train.epochs < 1) throw std::invalid_argument("train.epochs must be at least 1");
  if (train.batch_size < 2 || train.batch_size % 2 != 0) {
    throw std::invalid_argument("train.batch_size counts views and must be a positive even number");
  }
  if (train.checkpoint_every < 1) throw std::invalid_argument("train.checkpoint_every must be at least 1");
  if (!(eval.iou_threshold > 0.0 && eval.iou_threshold <= 1.0)) {
    throw std::invalid_argument("eval.iou_threshold must lie in (0,1]");
  }
  if (!(eval.fppi_max > 0.0)) throw std::invalid_argument("eval.fppi_max must be positive");
  if (eval.topk < 1) throw std::invalid_argument("eval.topk must be at least 1");
  if (ablation.cells.empty() || ablation.seeds.empty()) {
    throw std::invalid_argument("ablation.cells and ablation.seeds must not be empty");
  }
}

RunConfig parse_config(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  RunConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw std::invalid_argument("config: key '" + section + "' is outside any section");
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      const Field* field = find_field(full);
      if (!field) throw std::invalid_argument("config: unknown key '" + key + "' in section [" + section + "]");
      field->set(c, full, trim(value.get_value<std::string>()));
    }
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return parse_config(buf.str());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

std::string to_ini(const RunConfig& config) {
  std::ostringstream os;
  std::string current;
  for (const auto& [name, field] : fields()) {
    const auto dot = name.find('.');
    const std::string section = name.substr(0, dot);
    if (section != current) {
      if (!current.empty()) os << '\n';
      os << '[' << section << "]\n";
      current = section;
    }
    os << name.substr(dot + 1) << " = " << field.get(config) << '\n';
  }
  return os.str();
}

}  // namespace dhn
