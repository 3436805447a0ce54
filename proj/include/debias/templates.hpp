#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace debias::cot {

/// Prompt templates loaded from `<name>.txt` files in one directory.
/// Placeholders are written `{{key}}`.
class TemplateSet {
 public:
  /// Loads every *.txt file of `dir`; throws std::runtime_error if none exist.
  static TemplateSet load(const std::filesystem::path& dir);
  /// The templates shipped with the project.
  static TemplateSet builtin();

  void set(std::string name, std::string content);
  /// Throws std::out_of_range naming the missing template.
  const std::string& get(std::string_view name) const;
  bool contains(std::string_view name) const;

 private:
  std::map<std::string, std::string, std::less<>> templates_;
};

/// Single-pass substitution; substituted text is never rescanned.
/// Throws std::invalid_argument on an unknown or unterminated placeholder.
std::string render_template(std::string_view tmpl,
                            const std::map<std::string, std::string, std::less<>>& vars);

/// Makes text safe to embed on one line: backslash, newline and carriage
/// return become \\, \n and \r.
std::string escape_field(std::string_view text);
std::string unescape_field(std::string_view text);

}  // namespace debias::cot
