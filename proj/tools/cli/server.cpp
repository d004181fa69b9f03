#include "server.hpp"

#include <json.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <iostream>
#include <random>

namespace matattr::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

Reply json_reply(int status, const json& body) { return {status, body.dump(), "application/json"}; }

Reply error_reply(int status, const std::string& message) { return json_reply(status, {{"error", message}}); }

const char* kPlaceholderPage = R"(<!doctype html>
<html><head><meta charset="utf-8"><title>annotation</title></head>
<body><p>No UI assets configured. API: GET /api/task, POST /api/submit, GET /api/stats.</p></body></html>
)";

}  // namespace

TaskServer::TaskServer(std::vector<perception::SimilarityTask> tasks, std::map<std::string, patchlab::Image> patches,
                       fs::path log_path, ServerOptions options)
    : tasks_(std::move(tasks)), patches_(std::move(patches)), log_path_(std::move(log_path)), options_(std::move(options)) {
  require(options_.quorum >= 1, ErrorKind::InvalidInput, "quorum must be at least 1");
  if (options_.secret.empty()) {
    std::random_device rd;
    options_.secret = std::to_string(rd()) + "-" + std::to_string(rd());
  }
  for (std::size_t t = 0; t < tasks_.size(); ++t) {
    const auto& task = tasks_[t];
    require(task_index_.emplace(task.task_id, t).second, ErrorKind::InvalidInput, "duplicate task id " + task.task_id);
    std::vector<std::string> ids = task.shown_patches;
    ids.push_back(task.reference_patch);
    for (const auto& id : ids) {
      require(patches_.count(id) > 0, ErrorKind::InvalidInput, "task " + task.task_id + ": unknown patch " + id);
      token_to_patch_.emplace(token_for(id), id);
    }
  }
  counts_.assign(tasks_.size(), 0);

  if (fs::exists(log_path_)) {
    for (const auto& r : perception::read_annotations(log_path_)) {
      auto it = task_index_.find(r.task_id);
      if (it == task_index_.end()) continue;
      if (submitted_.emplace(it->second, r.annotator_id).second) ++counts_[it->second];
    }
  }
  install_routes();
}

std::string TaskServer::token_for(const std::string& patch) const {
  return sha256_hex(options_.secret + ":" + patch).substr(0, 24);
}

std::string TaskServer::task_payload(std::size_t t) const {
  const auto& task = tasks_[t];
  json shown = json::array();
  for (std::size_t slot = 0; slot < task.shown_patches.size(); ++slot)
    shown.push_back({{"category_slot", slot}, {"image_url", "/img/" + token_for(task.shown_patches[slot]) + ".png"}});
  return json{{"task_id", task.task_id},
              {"reference_image_url", "/img/" + token_for(task.reference_patch) + ".png"},
              {"shown", shown}}
      .dump();
}

void TaskServer::expire(Clock::time_point now) {
  for (auto it = reservations_.begin(); it != reservations_.end();)
    it = it->second.expires <= now ? reservations_.erase(it) : std::next(it);
}

int TaskServer::reserved(std::size_t t) const {
  int n = 0;
  for (const auto& [annotator, r] : reservations_) n += r.task == t;
  return n;
}

Reply TaskServer::next_task(const std::string& annotator) {
  std::lock_guard lock(mutex_);
  const auto now = clock_();
  expire(now);
  if (auto it = reservations_.find(annotator); it != reservations_.end()) {
    it->second.expires = now + options_.reservation;
    return {200, task_payload(it->second.task)};
  }
  for (std::size_t step = 0; step < tasks_.size(); ++step) {
    const std::size_t t = (cursor_ + step) % tasks_.size();
    if (submitted_.count({t, annotator})) continue;
    if (counts_[t] + reserved(t) >= options_.quorum) continue;
    reservations_[annotator] = {t, now + options_.reservation};
    cursor_ = (t + 1) % tasks_.size();
    return {200, task_payload(t)};
  }
  return {204, "", "application/json"};
}

void TaskServer::append(const std::string& line) {
  const int fd = ::open(log_path_.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd < 0) fail(ErrorKind::Io, "cannot open annotation log " + log_path_.string());
  const ssize_t n = ::write(fd, line.data(), line.size());
  ::close(fd);
  if (n != static_cast<ssize_t>(line.size())) fail(ErrorKind::Io, "short write to annotation log " + log_path_.string());
}

Reply TaskServer::submit(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    return error_reply(400, std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) return error_reply(400, "submission must be a JSON object");
  if (!j.contains("task_id") || !j["task_id"].is_string()) return error_reply(400, "task_id must be a string");
  if (!j.contains("annotator") || !j["annotator"].is_string() || j["annotator"].get<std::string>().empty())
    return error_reply(400, "annotator must be a non-empty string");
  if (!j.contains("decisions") || !j["decisions"].is_array()) return error_reply(400, "decisions must be an array");

  const std::string task_id = j["task_id"].get<std::string>();
  const std::string annotator = j["annotator"].get<std::string>();
  auto it = task_index_.find(task_id);
  if (it == task_index_.end()) return error_reply(400, "unknown task_id " + task_id);
  const auto& task = tasks_[it->second];

  perception::AnnotationRecord record;
  record.task_id = task_id;
  record.annotator_id = annotator;
  record.order = task.shown_categories;
  for (const auto& d : j["decisions"]) {
    if (!d.is_number_integer() || (d.get<int>() != 0 && d.get<int>() != 1))
      return error_reply(400, "decisions must contain only 0 and 1");
    record.decisions.push_back(d.get<int>());
  }
  if (record.decisions.size() != task.shown_patches.size())
    return error_reply(400, "expected " + std::to_string(task.shown_patches.size()) + " decisions, got " +
                                std::to_string(record.decisions.size()));

  std::lock_guard lock(mutex_);
  append(perception::annotation_to_json(record) + "\n");
  ++lines_;
  const bool fresh = submitted_.emplace(it->second, annotator).second;
  if (fresh) {
    ++counts_[it->second];
  } else {
    ++duplicates_;
    std::cerr << "duplicate submission for task " << task_id << " by " << annotator << "; last write wins\n";
  }
  if (auto r = reservations_.find(annotator); r != reservations_.end() && r->second.task == it->second)
    reservations_.erase(r);
  return json_reply(200, {{"status", "ok"}, {"duplicate", !fresh}});
}

Reply TaskServer::stats() const {
  std::lock_guard lock(mutex_);
  int complete = 0;
  for (int c : counts_) complete += c >= options_.quorum;
  return json_reply(200, {{"tasks", tasks_.size()},
                          {"submissions", submitted_.size()},
                          {"log_lines", lines_},
                          {"duplicates", duplicates_},
                          {"complete_tasks", complete},
                          {"in_flight", reservations_.size()},
                          {"quorum", options_.quorum}});
}

Reply TaskServer::image(const std::string& token) const {
  auto it = token_to_patch_.find(token);
  if (it == token_to_patch_.end()) return error_reply(404, "unknown image");
  std::lock_guard lock(mutex_);
  auto cached = png_cache_.find(token);
  if (cached == png_cache_.end())
    cached = png_cache_.emplace(token, patchlab::encode_png(patches_.at(it->second))).first;
  return {200, cached->second, "image/png"};
}

void TaskServer::install_routes() {
  auto send = [](httplib::Response& res, const Reply& r) {
    res.status = r.status;
    if (!r.body.empty()) res.set_content(r.body, r.content_type);
  };
  http_.Get("/api/task", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, next_task(req.has_param("annotator") ? req.get_param_value("annotator") : std::string("anonymous")));
  });
  http_.Post("/api/submit", [this, send](const httplib::Request& req, httplib::Response& res) {
    try {
      send(res, submit(req.body));
    } catch (const Error& e) {
      send(res, error_reply(500, e.what()));
    }
  });
  http_.Get("/api/stats", [this, send](const httplib::Request&, httplib::Response& res) { send(res, stats()); });
  http_.Get(R"(/img/([0-9a-f]+)\.png)", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, image(req.matches[1]));
  });
  if (!options_.static_dir.empty()) {
    require(http_.set_mount_point("/", options_.static_dir.string()), ErrorKind::Io,
            "static directory " + options_.static_dir.string() + " not found");
  } else {
    http_.Get("/", [](const httplib::Request&, httplib::Response& res) { res.set_content(kPlaceholderPage, "text/html"); });
  }
}

}  // namespace matattr::cli
