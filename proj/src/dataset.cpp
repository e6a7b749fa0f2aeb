#include "promptcount/dataset.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace promptcount {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kAnnotationsFile = "annotations.json";
constexpr const char* kImagesDir = "images";

[[noreturn]] void malformed(const std::string& where, const std::string& what) {
  throw MalformedDatasetError(where + ": " + what);
}

const json& require(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) malformed(where, std::string("missing field '") + key + "'");
  return obj.at(key);
}

template <typename T>
T require_as(const json& obj, const char* key, const std::string& where) {
  const json& v = require(obj, key, where);
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    malformed(where, std::string("field '") + key + "' has the wrong type");
  }
}

struct CategoryTable {
  std::map<std::string, int> ids;
  std::vector<std::string> names;

  int id_for(const std::string& name) {
    auto [it, inserted] = ids.try_emplace(name, static_cast<int>(names.size()) + 1);
    if (inserted) names.push_back(name);
    return it->second;
  }
};

json box_to_pixels(const Box& b, int w, int h) {
  return json::array({b.x_min() * w, b.y_min() * h, b.width() * w, b.height() * h});
}

}  // namespace

Dataset make_dataset(std::string name, std::vector<Scene> scenes) {
  Dataset ds{std::move(name), {}};
  ds.records.reserve(scenes.size());
  std::int64_t id = 1;
  for (Scene& s : scenes) ds.records.push_back({id++, std::move(s)});
  return ds;
}

void save_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir / kImagesDir);

  CategoryTable categories;
  json images = json::array();
  json annotations = json::array();
  json exemplars = json::object();
  std::set<std::string> file_names;
  std::int64_t next_ann_id = 1;

  for (const SceneRecord& rec : ds.records) {
    const Scene& scene = rec.scene;
    const SceneAnnotation& ann = scene.annotation;
    if (ann.image_ref.empty()) throw std::invalid_argument("scene " + std::to_string(rec.image_id) + " has no image_ref");
    if (!file_names.insert(ann.image_ref).second) {
      throw std::invalid_argument("duplicate image file name " + ann.image_ref);
    }
    const int w = scene.image.width;
    const int h = scene.image.height;
    const int target_cat = categories.id_for(ann.target_label);
    const int distractor_cat = categories.id_for(ann.distractor_label);
    images.push_back({{"id", rec.image_id},
                      {"file_name", ann.image_ref},
                      {"width", w},
                      {"height", h},
                      {"target_category_id", target_cat},
                      {"distractor_category_id", distractor_cat}});

    std::vector<std::int64_t> target_ids;
    auto emit = [&](const Box& b, int cat) {
      const std::int64_t id = next_ann_id++;
      annotations.push_back({{"id", id},
                             {"image_id", rec.image_id},
                             {"category_id", cat},
                             {"bbox", box_to_pixels(b, w, h)},
                             {"area", box_area_pixels(b, w, h)},
                             {"iscrowd", 0},
                             {"bbox_normalized", {b.x_min(), b.y_min(), b.x_max(), b.y_max()}}});
      return id;
    };
    for (const Box& b : ann.target_boxes) target_ids.push_back(emit(b, target_cat));
    for (const Box& b : ann.distractor_boxes) emit(b, distractor_cat);

    json ex = json::array();
    for (std::size_t i : ann.exemplars) ex.push_back(target_ids.at(i));
    exemplars[std::to_string(rec.image_id)] = ex;

    write_png(scene.image, dir / kImagesDir / ann.image_ref);
  }

  json cats = json::array();
  for (std::size_t i = 0; i < categories.names.size(); ++i) {
    cats.push_back({{"id", static_cast<int>(i) + 1}, {"name", categories.names[i]}});
  }
  json root = {{"info", {{"description", ds.name}, {"format_version", kDatasetFormatVersion}}},
               {"images", images},
               {"annotations", annotations},
               {"categories", cats},
               {"exemplars", exemplars}};

  std::ofstream out(dir / kAnnotationsFile);
  if (!out) throw std::runtime_error("cannot write " + (dir / kAnnotationsFile).string());
  out << root.dump(1) << '\n';
  if (!out) throw std::runtime_error("short write to " + (dir / kAnnotationsFile).string());
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path ann_path = dir / kAnnotationsFile;
  std::ifstream in(ann_path);
  if (!in) throw MalformedDatasetError("cannot open " + ann_path.string());

  json root;
  try {
    root = json::parse(in);
  } catch (const json::parse_error& e) {
    throw MalformedDatasetError(ann_path.string() + ": not valid JSON at byte " + std::to_string(e.byte));
  }
  if (!root.is_object()) malformed(ann_path.string(), "top level is not an object");

  Dataset ds;
  ds.name = dir.filename().string();
  if (root.contains("info") && root["info"].is_object()) {
    const json& info = root["info"];
    if (info.contains("format_version")) {
      const json& v = info["format_version"];
      if (!v.is_number_integer() || v.get<int>() != kDatasetFormatVersion) {
        throw DatasetVersionError("dataset format version " + v.dump() + " is not supported (expected " +
                                  std::to_string(kDatasetFormatVersion) + ")");
      }
    }
    if (info.contains("description") && info["description"].is_string()) ds.name = info["description"];
  }

  std::map<int, std::string> category_names;
  const json& cats = require(root, "categories", "root");
  if (!cats.is_array()) malformed("categories", "not an array");
  for (std::size_t i = 0; i < cats.size(); ++i) {
    const std::string where = "categories[" + std::to_string(i) + "]";
    category_names[require_as<int>(cats[i], "id", where)] = require_as<std::string>(cats[i], "name", where);
  }

  struct PendingImage {
    std::int64_t id;
    std::string file_name;
    int width, height;
    std::optional<int> target_cat, distractor_cat;
    std::vector<std::pair<std::int64_t, json>> anns;  // (annotation id, record)
  };
  std::vector<PendingImage> pending;
  std::map<std::int64_t, std::size_t> index_of;

  const json& images = require(root, "images", "root");
  if (!images.is_array()) malformed("images", "not an array");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string where = "images[" + std::to_string(i) + "]";
    PendingImage p{require_as<std::int64_t>(images[i], "id", where),
                   require_as<std::string>(images[i], "file_name", where),
                   require_as<int>(images[i], "width", where),
                   require_as<int>(images[i], "height", where),
                   std::nullopt,
                   std::nullopt,
                   {}};
    if (p.width <= 0 || p.height <= 0) malformed(where, "width and height must be positive");
    if (images[i].contains("target_category_id")) p.target_cat = require_as<int>(images[i], "target_category_id", where);
    if (images[i].contains("distractor_category_id")) {
      p.distractor_cat = require_as<int>(images[i], "distractor_category_id", where);
    }
    if (!index_of.emplace(p.id, pending.size()).second) malformed(where, "duplicate image id");
    pending.push_back(std::move(p));
  }

  const json& anns = require(root, "annotations", "root");
  if (!anns.is_array()) malformed("annotations", "not an array");
  std::map<std::int64_t, std::pair<std::size_t, int>> ann_lookup;  // ann id -> (image index, category)
  for (std::size_t i = 0; i < anns.size(); ++i) {
    const std::string where = "annotations[" + std::to_string(i) + "]";
    const auto id = require_as<std::int64_t>(anns[i], "id", where);
    const auto image_id = require_as<std::int64_t>(anns[i], "image_id", where);
    const auto cat = require_as<int>(anns[i], "category_id", where);
    const auto bbox = require_as<std::vector<double>>(anns[i], "bbox", where);
    if (bbox.size() != 4) malformed(where, "bbox must have 4 elements [x, y, width, height]");
    if (!(bbox[2] > 0.0) || !(bbox[3] > 0.0)) malformed(where, "bbox width and height must be positive");
    auto it = index_of.find(image_id);
    if (it == index_of.end()) malformed(where, "references unknown image_id " + std::to_string(image_id));
    if (!category_names.contains(cat)) malformed(where, "references unknown category_id " + std::to_string(cat));
    if (!ann_lookup.emplace(id, std::pair{it->second, cat}).second) malformed(where, "duplicate annotation id");
    pending[it->second].anns.emplace_back(id, anns[i]);
  }

  std::map<std::int64_t, std::vector<std::int64_t>> exemplar_ids;
  if (root.contains("exemplars")) {
    const json& ex = root["exemplars"];
    if (!ex.is_object()) malformed("exemplars", "not an object");
    for (const auto& [key, list] : ex.items()) {
      const std::string where = "exemplars[" + key + "]";
      std::int64_t image_id = 0;
      try {
        image_id = std::stoll(key);
      } catch (const std::exception&) {
        malformed(where, "key is not an image id");
      }
      if (!list.is_array() || list.size() > kMaxExemplars) malformed(where, "must be a list of at most 3 ids");
      for (const json& v : list) {
        if (!v.is_number_integer()) malformed(where, "annotation ids must be integers");
        exemplar_ids[image_id].push_back(v.get<std::int64_t>());
      }
    }
  }

  for (PendingImage& p : pending) {
    const std::string where = "images[" + std::to_string(index_of[p.id]) + "]";
    const auto ex_it = exemplar_ids.find(p.id);
    std::optional<int> target_cat = p.target_cat;
    if (!target_cat && ex_it != exemplar_ids.end() && !ex_it->second.empty()) {
      auto a = ann_lookup.find(ex_it->second.front());
      if (a == ann_lookup.end()) malformed(where, "exemplar references unknown annotation");
      target_cat = a->second.second;
    }

    SceneRecord rec;
    rec.image_id = p.id;
    SceneAnnotation& ann = rec.scene.annotation;
    ann.image_ref = p.file_name;
    if (target_cat) {
      if (!category_names.contains(*target_cat)) malformed(where, "unknown target category");
      ann.target_label = category_names[*target_cat];
    }
    if (p.distractor_cat) {
      if (!category_names.contains(*p.distractor_cat)) malformed(where, "unknown distractor category");
      ann.distractor_label = category_names[*p.distractor_cat];
    }

    std::map<std::int64_t, std::size_t> target_index;
    for (const auto& [id, a] : p.anns) {
      const auto bbox = a["bbox"].get<std::vector<double>>();
      const int cat = a["category_id"].get<int>();
      const std::string awhere = "annotation id " + std::to_string(id);
      std::optional<Box> box;
      try {
        if (a.contains("bbox_normalized")) {
          const auto nb = a["bbox_normalized"].get<std::vector<double>>();
          if (nb.size() != 4) malformed(awhere, "bbox_normalized must have 4 elements");
          box.emplace(nb[0], nb[1], nb[2], nb[3]);
        } else {
          box.emplace(bbox[0] / p.width, bbox[1] / p.height, (bbox[0] + bbox[2]) / p.width,
                      (bbox[1] + bbox[3]) / p.height);
        }
      } catch (const GeometryError& e) {
        malformed(awhere, std::string("bbox outside image: ") + e.what());
      } catch (const json::exception&) {
        malformed(awhere, "bbox_normalized has the wrong type");
      }
      if (!target_cat || cat == *target_cat) {
        target_index[id] = ann.target_boxes.size();
        ann.target_boxes.push_back(*box);
      } else {
        if (ann.distractor_label.empty()) ann.distractor_label = category_names[cat];
        ann.distractor_boxes.push_back(*box);
      }
    }
    if (ex_it != exemplar_ids.end()) {
      for (std::int64_t id : ex_it->second) {
        auto t = target_index.find(id);
        if (t == target_index.end()) malformed(where, "exemplar " + std::to_string(id) + " is not a target annotation");
        ann.exemplars.push_back(t->second);
      }
    }

    try {
      rec.scene.image = read_image(dir / kImagesDir / p.file_name);
    } catch (const ImageError& e) {
      malformed(where, e.what());
    }
    if (rec.scene.image.width != p.width || rec.scene.image.height != p.height) {
      malformed(where, "image dimensions differ from the annotation record");
    }
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

Dataset filter_min_instances(const Dataset& ds, std::size_t k) {
  Dataset out{ds.name, {}};
  for (const SceneRecord& r : ds.records) {
    if (r.scene.annotation.count() >= k) out.records.push_back(r);
  }
  return out;
}

}  // namespace promptcount
