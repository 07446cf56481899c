#include "htcn/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace htcn {
namespace {

[[noreturn]] void config_fail(const std::string& msg) {
    throw std::runtime_error("config: " + msg);
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::stringstream ss(s);
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) config_fail("empty element in list value '" + s + "'");
        out.push_back(item);
    }
    return out;
}

double parse_double_value(const std::string& s, const std::string& key) {
    const char* c = s.c_str();
    char* end = nullptr;
    double v = std::strtod(c, &end);
    if (end == c || *end != '\0') config_fail("key '" + key + "': not a number: '" + s + "'");
    return v;
}

long long parse_int_value(const std::string& s, const std::string& key) {
    const char* c = s.c_str();
    char* end = nullptr;
    long long v = std::strtoll(c, &end, 10);
    if (end == c || *end != '\0') config_fail("key '" + key + "': not an integer: '" + s + "'");
    return v;
}

std::uint64_t parse_u64_value(const std::string& s, const std::string& key) {
    const char* c = s.c_str();
    char* end = nullptr;
    unsigned long long v = std::strtoull(c, &end, 10);
    if (end == c || *end != '\0' || s[0] == '-') {
        config_fail("key '" + key + "': not an unsigned integer: '" + s + "'");
    }
    return v;
}

bool parse_bool_value(const std::string& s, const std::string& key) {
    if (s == "true") return true;
    if (s == "false") return false;
    config_fail("key '" + key + "': expected true or false, got '" + s + "'");
}

// One settable/printable field of the config. The table below is the single
// source of truth for section layout, key order, and value formatting; both
// the serializer and the parser walk it. Fields are addressed by a lambda
// returning a reference into the struct; reading through it from a const
// config goes via const_cast, confined to the two helpers here.
struct FieldDef {
    const char* section;
    const char* key;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;
};

const std::vector<FieldDef>& field_table() {
    static const std::vector<FieldDef> table = [] {
        std::vector<FieldDef> t;
        auto i = [&t](const char* sec, const char* key,
                      std::function<int&(ExperimentConfig&)> ref) {
            t.push_back({sec, key,
                         [ref](const ExperimentConfig& c) {
                             return std::to_string(ref(const_cast<ExperimentConfig&>(c)));
                         },
                         [ref, key](ExperimentConfig& c, const std::string& v) {
                             long long x = parse_int_value(v, key);
                             if (x < -(1ll << 31) || x > (1ll << 31)) {
                                 config_fail(std::string("key '") + key + "': out of range");
                             }
                             ref(c) = static_cast<int>(x);
                         }});
        };
        auto d = [&t](const char* sec, const char* key,
                      std::function<double&(ExperimentConfig&)> ref) {
            t.push_back({sec, key,
                         [ref](const ExperimentConfig& c) {
                             return format_shortest(ref(const_cast<ExperimentConfig&>(c)));
                         },
                         [ref, key](ExperimentConfig& c, const std::string& v) {
                             ref(c) = parse_double_value(v, key);
                         }});
        };
        auto b = [&t](const char* sec, const char* key,
                      std::function<bool&(ExperimentConfig&)> ref) {
            t.push_back({sec, key,
                         [ref](const ExperimentConfig& c) {
                             return std::string(ref(const_cast<ExperimentConfig&>(c)) ? "true"
                                                                                      : "false");
                         },
                         [ref, key](ExperimentConfig& c, const std::string& v) {
                             ref(c) = parse_bool_value(v, key);
                         }});
        };

        i("data", "image_size", [](ExperimentConfig& c) -> int& { return c.scene.image_size; });
        i("data", "min_objects", [](ExperimentConfig& c) -> int& { return c.scene.min_objects; });
        i("data", "max_objects", [](ExperimentConfig& c) -> int& { return c.scene.max_objects; });
        d("data", "min_scale", [](ExperimentConfig& c) -> double& { return c.scene.min_scale; });
        d("data", "max_scale", [](ExperimentConfig& c) -> double& { return c.scene.max_scale; });
        d("data", "fog_alpha_lo", [](ExperimentConfig& c) -> double& { return c.scene.fog.alpha_lo; });
        d("data", "fog_alpha_hi", [](ExperimentConfig& c) -> double& { return c.scene.fog.alpha_hi; });
        i("data", "fog_blur_radius", [](ExperimentConfig& c) -> int& { return c.scene.fog.blur_radius; });
        d("data", "fog_noise_sigma", [](ExperimentConfig& c) -> double& { return c.scene.fog.noise_sigma; });
        d("data", "fog_gray", [](ExperimentConfig& c) -> double& { return c.scene.fog.gray; });

        i("model", "num_classes", [](ExperimentConfig& c) -> int& { return c.model.num_classes; });
        i("model", "c1", [](ExperimentConfig& c) -> int& { return c.model.c1; });
        i("model", "c2", [](ExperimentConfig& c) -> int& { return c.model.c2; });
        i("model", "c3", [](ExperimentConfig& c) -> int& { return c.model.c3; });
        i("model", "rpn_hidden", [](ExperimentConfig& c) -> int& { return c.model.rpn_hidden; });
        i("model", "dis_hidden", [](ExperimentConfig& c) -> int& { return c.model.dis_hidden; });
        i("model", "d_ins", [](ExperimentConfig& c) -> int& { return c.model.d_ins; });
        i("model", "d_fused", [](ExperimentConfig& c) -> int& { return c.model.d_fused; });
        i("model", "ins_hidden", [](ExperimentConfig& c) -> int& { return c.model.ins_hidden; });
        t.push_back({"model", "anchor_scales",
                     [](const ExperimentConfig& c) {
                         std::string out;
                         for (std::size_t k = 0; k < c.model.anchor_scales.size(); ++k) {
                             if (k) out += ", ";
                             out += format_shortest(c.model.anchor_scales[k]);
                         }
                         return out;
                     },
                     [](ExperimentConfig& c, const std::string& v) {
                         c.model.anchor_scales.clear();
                         for (const auto& item : split_list(v)) {
                             c.model.anchor_scales.push_back(
                                 parse_double_value(item, "anchor_scales"));
                         }
                     }});
        i("model", "roi_size", [](ExperimentConfig& c) -> int& { return c.model.roi_size; });
        i("model", "proposal_top_k", [](ExperimentConfig& c) -> int& { return c.model.proposal_top_k; });
        d("model", "proposal_score_floor", [](ExperimentConfig& c) -> double& { return c.model.proposal_score_floor; });
        d("model", "proposal_nms_iou", [](ExperimentConfig& c) -> double& { return c.model.proposal_nms_iou; });
        i("model", "max_proposals", [](ExperimentConfig& c) -> int& { return c.model.max_proposals; });
        i("model", "instance_align_top_k", [](ExperimentConfig& c) -> int& { return c.model.instance_align_top_k; });
        d("model", "match_pos_iou", [](ExperimentConfig& c) -> double& { return c.model.match_pos_iou; });
        d("model", "match_neg_iou", [](ExperimentConfig& c) -> double& { return c.model.match_neg_iou; });
        i("model", "neg_per_pos", [](ExperimentConfig& c) -> int& { return c.model.neg_per_pos; });
        d("model", "eval_score_floor", [](ExperimentConfig& c) -> double& { return c.model.eval_score_floor; });
        d("model", "eval_nms_iou", [](ExperimentConfig& c) -> double& { return c.model.eval_nms_iou; });
        i("model", "eval_max_dets", [](ExperimentConfig& c) -> int& { return c.model.eval_max_dets; });
        b("model", "iwat_i", [](ExperimentConfig& c) -> bool& { return c.model.use_iwat_i; });
        b("model", "cila", [](ExperimentConfig& c) -> bool& { return c.model.use_cila; });
        b("model", "local_masks", [](ExperimentConfig& c) -> bool& { return c.model.use_local_masks; });
        b("model", "interpolation", [](ExperimentConfig& c) -> bool& { return c.model.use_interpolation; });
        b("model", "context", [](ExperimentConfig& c) -> bool& { return c.model.use_context; });
        b("model", "tensor_product", [](ExperimentConfig& c) -> bool& { return c.model.use_tensor_product; });

        i("train", "iterations", [](ExperimentConfig& c) -> int& { return c.train.iterations; });
        d("train", "lr", [](ExperimentConfig& c) -> double& { return c.train.lr; });
        d("train", "momentum", [](ExperimentConfig& c) -> double& { return c.train.momentum; });
        d("train", "lr_decay_factor", [](ExperimentConfig& c) -> double& { return c.train.lr_decay_factor; });
        d("train", "lr_decay_at", [](ExperimentConfig& c) -> double& { return c.train.lr_decay_at; });
        d("train", "lambda", [](ExperimentConfig& c) -> double& { return c.train.lambda; });
        i("train", "per_stream", [](ExperimentConfig& c) -> int& { return c.train.per_stream; });
        i("train", "eval_images", [](ExperimentConfig& c) -> int& { return c.train.eval_images; });
        i("train", "checkpoint_every", [](ExperimentConfig& c) -> int& { return c.train.checkpoint_every; });
        t.push_back({"train", "seeds",
                     [](const ExperimentConfig& c) {
                         std::string out;
                         for (std::size_t k = 0; k < c.train.seeds.size(); ++k) {
                             if (k) out += ", ";
                             out += std::to_string(c.train.seeds[k]);
                         }
                         return out;
                     },
                     [](ExperimentConfig& c, const std::string& v) {
                         c.train.seeds.clear();
                         for (const auto& item : split_list(v)) {
                             c.train.seeds.push_back(parse_u64_value(item, "seeds"));
                         }
                     }});
        return t;
    }();
    return table;
}

}  // namespace

ExperimentConfig default_config() { return ExperimentConfig{}; }

ExperimentConfig source_only_variant(ExperimentConfig cfg) {
    cfg.train.lambda = 0.0;
    cfg.model.use_iwat_i = false;
    cfg.model.use_cila = false;
    cfg.model.use_local_masks = false;
    cfg.model.use_interpolation = false;
    cfg.model.use_context = false;
    cfg.model.use_tensor_product = false;
    return cfg;
}

std::string serialize_config(const ExperimentConfig& cfg) {
    // scene.seed is runtime state, never serialized; keep the model's
    // image_size slaved to the data section so the two cannot drift.
    ExperimentConfig c = cfg;
    c.model.image_size = c.scene.image_size;

    std::string out;
    const char* current = "";
    for (const auto& f : field_table()) {
        if (std::string(current) != f.section) {
            if (!out.empty()) out += "\n";
            out += std::string("[") + f.section + "]\n";
            current = f.section;
        }
        out += std::string(f.key) + " = " + f.get(c) + "\n";
    }
    return out;
}

ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig cfg = default_config();
    std::string section;
    std::stringstream ss(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(ss, raw)) {
        ++line_no;
        std::string line = raw;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;

        if (line.front() == '[') {
            if (line.back() != ']') {
                config_fail("line " + std::to_string(line_no) + ": malformed section header");
            }
            section = trim(line.substr(1, line.size() - 2));
            bool known = false;
            for (const auto& f : field_table()) known = known || section == f.section;
            if (!known) {
                config_fail("line " + std::to_string(line_no) + ": unknown section [" + section + "]");
            }
            continue;
        }

        std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            config_fail("line " + std::to_string(line_no) + ": expected 'key = value', got '" +
                        line + "'");
        }
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (section.empty()) {
            config_fail("line " + std::to_string(line_no) + ": key '" + key +
                        "' appears before any [section]");
        }

        bool found = false;
        for (const auto& f : field_table()) {
            if (section == f.section && key == f.key) {
                f.set(cfg, value);
                found = true;
                break;
            }
        }
        if (!found) {
            config_fail("line " + std::to_string(line_no) + ": unknown key '" + key + "' in [" +
                        section + "]");
        }
    }
    cfg.model.image_size = cfg.scene.image_size;
    validate_config(cfg);
    return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) config_fail("cannot open config file '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

void save_config_file(const ExperimentConfig& cfg, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) config_fail("cannot write config file '" + path + "'");
    out << serialize_config(cfg);
    if (!out) config_fail("write to '" + path + "' failed");
}

void validate_config(const ExperimentConfig& cfg) {
    if (cfg.train.lambda < 0.0) config_fail("lambda must be >= 0");
    if (cfg.train.iterations < 1) config_fail("iterations must be >= 1");
    if (cfg.train.lr <= 0.0) config_fail("lr must be > 0");
    if (cfg.train.momentum < 0.0 || cfg.train.momentum >= 1.0) {
        config_fail("momentum must be in [0, 1)");
    }
    if (cfg.train.lr_decay_factor <= 0.0) config_fail("lr_decay_factor must be > 0");
    if (cfg.train.lr_decay_at <= 0.0 || cfg.train.lr_decay_at > 1.0) {
        config_fail("lr_decay_at must be in (0, 1]");
    }
    if (cfg.train.per_stream < 1) config_fail("per_stream must be >= 1");
    if (cfg.train.eval_images < 1) config_fail("eval_images must be >= 1");
    if (cfg.train.checkpoint_every < 0) config_fail("checkpoint_every must be >= 0");
    if (cfg.train.seeds.empty()) config_fail("seeds must not be empty");
    if (cfg.scene.min_objects < 1 || cfg.scene.max_objects < cfg.scene.min_objects) {
        config_fail("object count range is invalid");
    }
    if (cfg.scene.min_scale <= 0.0 || cfg.scene.max_scale < cfg.scene.min_scale) {
        config_fail("object scale range is invalid");
    }
    if (cfg.model.num_classes != kNumClasses) {
        config_fail("num_classes must be " + std::to_string(kNumClasses) +
                    " to match the scene generator");
    }
}

std::string format_shortest(double x) {
    char buf[64];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, x);
        if (std::strtod(buf, nullptr) == x) return buf;
    }
    return buf;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
    return fnv1a64(serialize_config(cfg));
}

std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace htcn
