//! Prior-knowledge assembly: sentence splitting, abnormal-sentence
//! filtering over retrieved reports, and token encoding under a cap.

use crate::corpus::{label_sentence, DiseaseGrammar, Vocabulary, SEP};

/// Splits on '.', '!' and '?', trimming whitespace and dropping empties.
pub fn split_sentences(report: &str) -> Vec<String> {
    report
        .split(['.', '!', '?'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug)]
pub struct PriorSentence {
    pub text: String,
    pub source_id: String,
    pub labels: Vec<bool>,
}

/// Ordered abnormal sentences from the retrieved reports plus their encoded
/// token stream, capped at `max_tokens`.
#[derive(Clone, Debug, Default)]
pub struct PriorKnowledge {
    pub sentences: Vec<PriorSentence>,
    pub tokens: Vec<usize>,
}

impl PriorKnowledge {
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Walks reports in retrieval-rank order and sentences in document order,
/// keeping those with at least one positive disease bit. Sentences are
/// joined by a separator token; the stream is cut at `max_tokens` (token
/// boundaries only, which ids guarantee).
pub fn extract_prior(
    reports: &[(String, String)],
    grammar: &DiseaseGrammar,
    vocab: &Vocabulary,
    max_tokens: usize,
) -> PriorKnowledge {
    let mut prior = PriorKnowledge::default();
    for (source_id, text) in reports {
        for sentence in split_sentences(text) {
            let labels = label_sentence(&sentence, grammar);
            if !labels.iter().any(|&b| b) {
                continue;
            }
            if prior.tokens.len() >= max_tokens {
                return prior;
            }
            if !prior.tokens.is_empty() {
                prior.tokens.push(SEP);
            }
            let mut ids = vocab.encode(&sentence);
            let room = max_tokens.saturating_sub(prior.tokens.len());
            ids.truncate(room);
            if ids.is_empty() {
                // the separator consumed the last slot; drop it again
                prior.tokens.pop();
                return prior;
            }
            prior.tokens.extend_from_slice(&ids);
            prior.sentences.push(PriorSentence {
                text: sentence,
                source_id: source_id.clone(),
                labels,
            });
        }
    }
    prior
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig, Vocabulary};

    const EXAMPLE_REPORT: &str = "Lungs are clear. No pleural effusions or pneumothoraces. \
        Heart size is upper limits of normal. There are low lung volumes with bronchovascular \
        crowding and scattered opacities in the bilateral lung.";

    fn vocab() -> Vocabulary {
        let corpus = generate_corpus(5, 60, &CorpusConfig::default());
        Vocabulary::build(&corpus, 1).unwrap()
    }

    #[test]
    fn splits_on_terminal_punctuation() {
        let parts = split_sentences("Lungs are clear. No pleural effusions or pneumothoraces.");
        assert_eq!(
            parts,
            vec![
                "Lungs are clear".to_string(),
                "No pleural effusions or pneumothoraces".to_string()
            ]
        );
    }

    #[test]
    fn empty_report_splits_to_nothing() {
        assert!(split_sentences("").is_empty());
        assert!(split_sentences(" . ! ?").is_empty());
    }

    #[test]
    fn join_and_resplit_round_trips_generated_reports() {
        let corpus = generate_corpus(13, 40, &CorpusConfig::default());
        for s in &corpus {
            let parts = split_sentences(&s.report);
            let rejoined = format!("{}. ", parts.join(". "));
            assert_eq!(split_sentences(&rejoined), parts, "report {}", s.id);
        }
    }

    #[test]
    fn example_report_yields_exactly_the_abnormal_sentences() {
        let g = crate::corpus::DiseaseGrammar::default();
        let vocab = vocab();
        let prior = extract_prior(
            &[("r1".to_string(), EXAMPLE_REPORT.to_string())],
            &g,
            &vocab,
            100,
        );
        let texts: Vec<&str> = prior.sentences.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(
            texts,
            vec![
                "Heart size is upper limits of normal",
                "There are low lung volumes with bronchovascular crowding and scattered \
                 opacities in the bilateral lung"
            ]
        );
    }

    #[test]
    fn all_normal_reports_yield_empty_prior() {
        let g = crate::corpus::DiseaseGrammar::default();
        let vocab = vocab();
        let reports = vec![
            ("a".to_string(), "The lungs are clear. The trachea is midline.".to_string()),
            ("b".to_string(), "No acute osseous abnormality is identified.".to_string()),
            ("c".to_string(), "Visualized soft tissues are unremarkable.".to_string()),
        ];
        let prior = extract_prior(&reports, &g, &vocab, 100);
        assert!(prior.is_empty());
        assert!(prior.sentences.is_empty());
    }

    #[test]
    fn overflowing_prior_is_cut_at_the_cap() {
        let g = crate::corpus::DiseaseGrammar::default();
        let vocab = vocab();
        // Stack enough abnormal sentences to exceed 300 tokens.
        let abnormal = "There is a small right pleural effusion";
        let text = vec![abnormal; 40].join(". ") + ".";
        let prior = extract_prior(&[("r".to_string(), text)], &g, &vocab, 100);
        assert!(prior.tokens.len() <= 100);
        assert!(prior.tokens.len() >= 95, "cap should be nearly saturated");
        // Sentence metadata only lists sentences that contributed tokens.
        let contributed: usize = prior
            .sentences
            .iter()
            .map(|s| vocab.encode(&s.text).len())
            .sum::<usize>()
            + prior.sentences.len().saturating_sub(1);
        assert!(contributed >= prior.tokens.len());
    }

    #[test]
    fn sentences_keep_rank_then_document_order() {
        let g = crate::corpus::DiseaseGrammar::default();
        let vocab = vocab();
        let reports = vec![
            (
                "first".to_string(),
                "There is mild pulmonary edema. The lungs are clear. \
                 Moderate pneumothorax is identified."
                    .to_string(),
            ),
            (
                "second".to_string(),
                "Patchy opacities are present bilaterally.".to_string(),
            ),
        ];
        let prior = extract_prior(&reports, &g, &vocab, 100);
        let sources: Vec<&str> = prior.sentences.iter().map(|s| s.source_id.as_str()).collect();
        assert_eq!(sources, vec!["first", "first", "second"]);
        assert!(prior.sentences[0].text.contains("edema"));
        assert!(prior.sentences[1].text.contains("pneumothorax"));
    }

    #[test]
    fn every_prior_sentence_has_a_positive_bit() {
        let g = crate::corpus::DiseaseGrammar::default();
        let cfg = CorpusConfig::default();
        let corpus = generate_corpus(21, 30, &cfg);
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let reports: Vec<(String, String)> = corpus
            .iter()
            .map(|s| (s.id.clone(), s.report.clone()))
            .collect();
        let prior = extract_prior(&reports, &g, &vocab, 100);
        for s in &prior.sentences {
            assert!(s.labels.iter().any(|&b| b), "sentence {:?}", s.text);
        }
    }

    #[test]
    fn separator_tokens_delimit_sentences() {
        let g = crate::corpus::DiseaseGrammar::default();
        let vocab = vocab();
        let reports = vec![(
            "r".to_string(),
            "There is mild pulmonary edema. Moderate pneumothorax is identified.".to_string(),
        )];
        let prior = extract_prior(&reports, &g, &vocab, 100);
        let sep_count = prior.tokens.iter().filter(|&&t| t == SEP).count();
        assert_eq!(sep_count, 1);
        assert_eq!(prior.sentences.len(), 2);
    }
}
