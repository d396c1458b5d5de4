use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::encoders::{Image, Side, TextBatch, TokenSequence, XfmModel};
use crate::error::{Error, Result};
use crate::objectives::match_probability;

/// Scores for two-stage retrieval over a pool where image `i` and text `i`
/// are the true pair.
pub trait PairScorer {
    fn pool_size(&self) -> usize;
    /// Stage-one scores, indexed `[image][text]`.
    fn similarity(&self) -> Result<Vec<Vec<f64>>>;
    /// Match probabilities of `(image, text)` pairs, in order.
    fn match_probability(&self, pairs: &[(usize, usize)]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub r1: f64,
    pub r5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Image query, text candidates.
    pub text_retrieval: Recall,
    /// Text query, image candidates.
    pub image_retrieval: Recall,
    pub pool: usize,
    pub k: usize,
    /// Candidates scored in stage two that were outside the query's
    /// stage-one top k. Always 0.
    pub rerank_outside_topk: usize,
}

/// Per-query rankings, for inspection.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrace {
    pub stage1_text: Vec<Vec<usize>>,
    pub final_text: Vec<Vec<usize>>,
    pub stage1_image: Vec<Vec<usize>>,
    pub final_image: Vec<Vec<usize>>,
    /// Candidates handed to stage two per query, in the order above.
    pub reranked_text: Vec<Vec<usize>>,
    pub reranked_image: Vec<Vec<usize>>,
}

/// Indices sorted by descending score; ties keep index order.
fn rank_desc(scores: &[f64], order: &[usize]) -> Vec<usize> {
    let mut out = order.to_vec();
    out.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    out
}

fn recall(finals: &[Vec<usize>]) -> Recall {
    let n = finals.len() as f64;
    let hit = |r: usize| finals.iter().enumerate().filter(|(q, f)| f[..r.min(f.len())].contains(q)).count() as f64 / n;
    Recall { r1: hit(1), r5: hit(5) }
}

/// Stage one ranks by similarity; stage two re-ranks each query's top `k`
/// by match probability with a stable sort, leaving the tail in stage-one
/// order.
pub fn retrieval_eval_with<S: PairScorer + ?Sized>(scorer: &S, k: usize) -> Result<(RetrievalReport, RetrievalTrace)> {
    let n = scorer.pool_size();
    if k < 1 {
        return Err(Error::InvalidArgument("re-rank depth k must be at least 1".into()));
    }
    if n == 0 || k > n {
        return Err(Error::InvalidArgument(format!("re-rank depth {k} needs a pool of at least {k}, got {n}")));
    }
    let sim = scorer.similarity()?;
    if sim.len() != n || sim.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidArgument("similarity matrix does not match the pool".into()));
    }
    let identity: Vec<usize> = (0..n).collect();
    let mut trace = RetrievalTrace::default();
    for q in 0..n {
        trace.stage1_text.push(rank_desc(&sim[q], &identity));
        let column: Vec<f64> = (0..n).map(|i| sim[i][q]).collect();
        trace.stage1_image.push(rank_desc(&column, &identity));
    }
    trace.reranked_text = trace.stage1_text.iter().map(|r| r[..k].to_vec()).collect();
    trace.reranked_image = trace.stage1_image.iter().map(|r| r[..k].to_vec()).collect();

    let mut wanted: Vec<(usize, usize)> = Vec::with_capacity(2 * n * k);
    for q in 0..n {
        wanted.extend(trace.reranked_text[q].iter().map(|&t| (q, t)));
        wanted.extend(trace.reranked_image[q].iter().map(|&i| (i, q)));
    }
    wanted.sort_unstable();
    wanted.dedup();
    let probs = scorer.match_probability(&wanted)?;
    if probs.len() != wanted.len() {
        return Err(Error::InvalidArgument("scorer returned the wrong number of probabilities".into()));
    }
    let table: HashMap<(usize, usize), f64> = wanted.iter().copied().zip(probs).collect();

    let mut outside = 0;
    let rerank = |stage1: &[usize], cands: &[usize], key: &dyn Fn(usize) -> (usize, usize), outside: &mut usize| {
        *outside += cands.iter().filter(|c| !stage1[..k].contains(c)).count();
        let mut scores = vec![f64::NEG_INFINITY; n];
        for &c in cands {
            scores[c] = table[&key(c)];
        }
        let mut f = rank_desc(&scores, cands);
        f.extend_from_slice(&stage1[k..]);
        f
    };
    for q in 0..n {
        let ft = rerank(&trace.stage1_text[q], &trace.reranked_text[q], &|t| (q, t), &mut outside);
        let fi = rerank(&trace.stage1_image[q], &trace.reranked_image[q], &|i| (i, q), &mut outside);
        trace.final_text.push(ft);
        trace.final_image.push(fi);
    }
    debug_assert_eq!(outside, 0);
    let report = RetrievalReport {
        text_retrieval: recall(&trace.final_text),
        image_retrieval: recall(&trace.final_image),
        pool: n,
        k,
        rerank_outside_topk: outside,
    };
    Ok((report, trace))
}

/// Scores a pool with a model: ITC cosine similarity, then the fusion
/// encoder's match probability.
pub struct ModelScorer<'a> {
    pub model: &'a XfmModel,
    pub images: Vec<Image>,
    pub texts: Vec<TokenSequence>,
    /// Pairs fused per forward pass.
    pub chunk: usize,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a XfmModel, images: Vec<Image>, texts: Vec<TokenSequence>) -> Result<Self> {
        if images.len() != texts.len() {
            return Err(Error::InvalidArgument("pool needs as many texts as images".into()));
        }
        Ok(Self {
            model,
            images,
            texts,
            chunk: 64,
        })
    }
}

impl PairScorer for ModelScorer<'_> {
    fn pool_size(&self) -> usize {
        self.images.len()
    }

    fn similarity(&self) -> Result<Vec<Vec<f64>>> {
        let g = Graph::new();
        let p = self.model.bind(&g, false)?;
        let t = self.model.encode_text(&p, &TextBatch::new(&self.texts)?)?;
        let v = self.model.encode_image(&p, &self.images, None)?;
        let tp = self.model.project_for_itc(&p, &t, Side::Text)?;
        let vp = self.model.project_for_itc(&p, &v, Side::Vision)?;
        let s = vp.matmul(tp.transpose()?)?.value();
        let n = self.images.len();
        Ok((0..n).map(|i| s.data()[i * n..(i + 1) * n].to_vec()).collect())
    }

    fn match_probability(&self, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        let g = Graph::new();
        let p = self.model.bind(&g, false)?;
        let t = self.model.encode_text(&p, &TextBatch::new(&self.texts)?)?;
        let v = self.model.encode_image(&p, &self.images, None)?;
        let mut out = Vec::with_capacity(pairs.len());
        // A fresh graph per chunk keeps memory flat.
        for chunk in pairs.chunks(self.chunk.max(1)) {
            let is: Vec<usize> = chunk.iter().map(|c| c.0).collect();
            let ts: Vec<usize> = chunk.iter().map(|c| c.1).collect();
            let cg = Graph::new();
            let cp = self.model.bind(&cg, false)?;
            let fused = self.model.fuse(&cp, &t.select(&ts)?.rebind(&cg)?, &v.select(&is)?.rebind(&cg)?)?;
            let prob = match_probability(self.model.itm_logits(&cp, &fused)?)?;
            out.extend_from_slice(prob.value().data());
        }
        Ok(out)
    }
}

pub fn retrieval_eval(model: &XfmModel, images: Vec<Image>, texts: Vec<TokenSequence>, k: usize) -> Result<RetrievalReport> {
    Ok(retrieval_eval_with(&ModelScorer::new(model, images, texts)?, k)?.0)
}
