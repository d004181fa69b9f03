#pragma once

#include "matattr/patchlab.hpp"
#include "matattr/perception.hpp"

#include <httplib.h>

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <vector>

namespace matattr::cli {

struct ServerOptions {
  int quorum = 10;  // submissions wanted per task
  std::chrono::seconds reservation{300};
  std::filesystem::path static_dir;
  std::string secret;  // salt for opaque image tokens; random when empty
};

struct Reply {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

/// Annotation backend: hands out tasks round-robin with timed reservations,
/// serves patches under opaque URLs and appends submissions to a JSON-lines log.
class TaskServer {
 public:
  using Clock = std::chrono::steady_clock;

  TaskServer(std::vector<perception::SimilarityTask> tasks, std::map<std::string, patchlab::Image> patches,
             std::filesystem::path log_path, ServerOptions options = {});

  Reply next_task(const std::string& annotator);
  Reply submit(const std::string& body);
  Reply stats() const;
  Reply image(const std::string& token) const;

  httplib::Server& http() { return http_; }
  void set_clock(std::function<Clock::time_point()> clock) { clock_ = std::move(clock); }

 private:
  struct Reservation {
    std::size_t task;
    Clock::time_point expires;
  };

  std::string token_for(const std::string& patch) const;
  std::string task_payload(std::size_t t) const;
  void expire(Clock::time_point now);
  int reserved(std::size_t t) const;
  void append(const std::string& line);
  void install_routes();

  std::vector<perception::SimilarityTask> tasks_;
  std::map<std::string, std::size_t> task_index_;
  std::map<std::string, patchlab::Image> patches_;
  std::map<std::string, std::string> token_to_patch_;
  std::filesystem::path log_path_;
  ServerOptions options_;

  mutable std::mutex mutex_;
  std::set<std::pair<std::size_t, std::string>> submitted_;
  std::vector<int> counts_;
  std::map<std::string, Reservation> reservations_;  // by annotator
  std::size_t cursor_ = 0;
  std::size_t lines_ = 0;
  std::size_t duplicates_ = 0;
  mutable std::map<std::string, std::string> png_cache_;

  std::function<Clock::time_point()> clock_ = [] { return Clock::now(); };
  httplib::Server http_;
};

}  // namespace matattr::cli
