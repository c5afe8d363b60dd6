#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gklab::gknow {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Gender : std::uint8_t { kFeminine, kMasculine };

std::string to_string(Gender g);
Gender parse_gender(std::string_view text);
Gender opposite(Gender g);

/// Kinds of gendered content; used both as a prediction target and as an assumption.
enum class Kind : std::uint8_t { kPronoun, kGender, kName, kLex, kStereo };

inline constexpr std::array<Kind, 5> kAllKinds = {Kind::kPronoun, Kind::kGender, Kind::kName, Kind::kLex,
                                                  Kind::kStereo};

std::string to_string(Kind k);
Kind parse_kind(std::string_view text);

/// One cell of the prediction × assumption grid; the diagonal is excluded.
struct SubsetKey {
  Kind prediction = Kind::kPronoun;
  Kind assumption = Kind::kGender;

  /// e.g. "pronoun_prediction_based_on_stereo".
  std::string name() const;
  bool stereotypical() const { return prediction == Kind::kStereo || assumption == Kind::kStereo; }
  static SubsetKey parse(std::string_view text);
  /// The 20 legal keys, prediction-major in kAllKinds order.
  static std::vector<SubsetKey> all();

  friend auto operator<=>(const SubsetKey&, const SubsetKey&) = default;
};

struct Term {
  std::string text;
  Gender gender = Gender::kFeminine;
  std::string category;  // "-" when the kind has no categories
  std::optional<int> pair;
};

/// Gendered term lists. Order follows the source file.
struct Lexicon {
  std::vector<Term> pronouns;        // she, he
  std::vector<Term> possessives;     // her, his
  std::vector<Term> indicators;      // subject forms of explicit gender
  std::vector<Term> gender_outputs;  // expected outputs of gender prediction
  std::vector<Term> names;
  std::vector<Term> lex;
  std::vector<Term> stereo;
  std::vector<Term> counterfactual;  // replacement subjects for lex/stereo corruptions
  std::string neutral_pronoun = "they";
  std::string neutral_gender = "person";

  /// Reads the tab-separated lexicon; throws ConfigError naming the path on failure.
  static Lexicon load(const std::filesystem::path& path);
  static Lexicon load_default();

  const std::vector<Term>& subjects(Kind k) const;
  /// Every surface form of a gendered term, lowercased except names.
  std::vector<std::string> gendered_terms() const;
};

enum class OutputCase : std::uint8_t { kVerbatim, kLower, kCapital };

struct Template {
  std::string text;  // contains one "[SUBJECT]" hole
  Kind prediction = Kind::kPronoun;
  std::string category = "-";  // restricts stereo outputs to one category
  std::vector<Kind> assumptions;  // empty means every assumption
  OutputCase output_case = OutputCase::kVerbatim;
  std::string source;

  bool allows(Kind assumption) const;
  bool possessive_subject() const;
  bool subject_first() const;
};

struct TemplateRegistry {
  std::vector<Template> templates;

  static TemplateRegistry load(const std::filesystem::path& path);
  static TemplateRegistry load_default();
};

/// Directory holding lexicon.tsv and templates.tsv; overridable with GKNOW_LAB_DATA.
std::filesystem::path default_data_dir();

}  // namespace gklab::gknow
