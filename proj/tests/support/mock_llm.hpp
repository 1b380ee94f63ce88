#pragma once

// In-process chat-completion server for scoring tests. Replies with a fixed
// text (or a queue of HTTP statuses first) and counts requests.

#include <atomic>
#include <deque>
#include <mutex>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

class MockLlm {
 public:
  MockLlm() {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      ++requests_;
      std::lock_guard lock(mu_);
      last_prompt_ = nlohmann::json::parse(req.body).at("messages").at(0).at("content").get<std::string>();
      if (!statuses_.empty()) {
        res.status = statuses_.front();
        statuses_.pop_front();
        return;
      }
      const nlohmann::json body = {{"choices", {{{"message", {{"role", "assistant"}, {"content", reply_}}}}}}};
      res.set_content(body.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockLlm() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int requests() const { return requests_; }
  void reply(std::string text) {
    std::lock_guard lock(mu_);
    reply_ = std::move(text);
  }
  void fail_next(int status, int times) {
    std::lock_guard lock(mu_);
    for (int i = 0; i < times; ++i) statuses_.push_back(status);
  }
  std::string last_prompt() {
    std::lock_guard lock(mu_);
    return last_prompt_;
  }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> requests_{0};
  std::mutex mu_;
  std::string reply_ = "3";
  std::string last_prompt_;
  std::deque<int> statuses_;
};
