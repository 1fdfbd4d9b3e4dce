//! Few-shot splits and their conversion into masked inputs.

use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::corpus::{Corpus, RawExample};
use crate::error::{Error, Result};
use crate::masking::{insert_masks, tokenize, MaskPolicy, MaskedExample, Vocab};
use crate::tensor::Rng;

/// `N` training and `N` validation examples per class plus a test set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotEpisode {
    pub classes: Vec<String>,
    pub train: Vec<RawExample>,
    pub val: Vec<RawExample>,
    pub test: Vec<RawExample>,
    pub data_seed: u64,
}

/// Stratified sample without replacement. The test set is `test` when
/// given, otherwise every example not drawn into train or validation.
pub fn sample_episode(
    corpus: &Corpus,
    test: Option<&Corpus>,
    n: usize,
    data_seed: u64,
) -> Result<FewShotEpisode> {
    let classes = corpus.classes();
    let mut rng = Rng::derive(data_seed, "episode");
    let mut train = Vec::with_capacity(n * classes.len());
    let mut val = Vec::with_capacity(n * classes.len());
    let mut taken = vec![false; corpus.len()];
    for class in &classes {
        let mut idx: Vec<usize> = corpus
            .examples
            .iter()
            .enumerate()
            .filter(|(_, e)| &e.label == class)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < 2 * n {
            return Err(Error::Input(format!(
                "class {class:?} has {} examples, an episode needs {}",
                idx.len(),
                2 * n
            )));
        }
        rng.shuffle(&mut idx);
        for (j, &i) in idx[..2 * n].iter().enumerate() {
            taken[i] = true;
            let dst = if j < n { &mut train } else { &mut val };
            dst.push(corpus.examples[i].clone());
        }
    }
    let test = match test {
        Some(t) => t.examples.clone(),
        None => corpus
            .examples
            .iter()
            .zip(&taken)
            .filter(|(_, t)| !**t)
            .map(|(e, _)| e.clone())
            .collect(),
    };
    Ok(FewShotEpisode {
        classes,
        train,
        val,
        test,
        data_seed,
    })
}

/// How raw text becomes model input.
#[derive(Clone, Debug)]
pub struct InputEncoding<'a> {
    pub vocab: &'a Vocab,
    pub classes: &'a [String],
    pub policy: MaskPolicy,
    pub max_seq: usize,
    /// Insert the toy cloze pattern before the masks.
    pub pattern: bool,
}

impl InputEncoding<'_> {
    pub fn encode(&self, raw: &RawExample) -> Result<MaskedExample> {
        let label = self
            .classes
            .iter()
            .position(|c| c == &raw.label)
            .ok_or_else(|| Error::Input(format!("label {:?} is not a known class", raw.label)))?;
        let mut sentences: Vec<Vec<usize>> = raw
            .texts()
            .iter()
            .map(|t| tokenize(t, self.vocab))
            .collect();
        if self.pattern {
            sentences[0] = baselines::apply_pattern(&sentences[0], self.vocab);
        }
        let mut ex = insert_masks(&sentences, self.policy, self.max_seq, label)?;
        ex.raw = raw.texts().iter().map(|s| s.to_string()).collect();
        Ok(ex)
    }

    pub fn encode_all(&self, raws: &[RawExample]) -> Result<Vec<MaskedExample>> {
        raws.iter().map(|r| self.encode(r)).collect()
    }
}
