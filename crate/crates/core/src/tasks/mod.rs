//! Synthetic tasks with exact verifiers.
//!
//! Every instance has a fixed layout per kind: a prompt `TAG items.. [PAD..] [SEP]`
//! (payload left-aligned, padded up to a fixed length) followed by a generation window holding
//! `answer.. [EOA] [EOS]..` up to `gen_len`.

pub mod sudoku;

use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vocab::{self, as_digit, digit, BLANK, EOA, EOS, PAD, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Sort,
    ModsumChain,
    MiniCountdown,
    MiniSudoku,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Copy,
        TaskKind::Sort,
        TaskKind::ModsumChain,
        TaskKind::MiniCountdown,
        TaskKind::MiniSudoku,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Sort => "sort",
            TaskKind::ModsumChain => "modsum_chain",
            TaskKind::MiniCountdown => "mini_countdown",
            TaskKind::MiniSudoku => "mini_sudoku",
        }
    }

    fn tag(&self) -> usize {
        match self {
            TaskKind::Copy => vocab::TAG_COPY,
            TaskKind::Sort => vocab::TAG_SORT,
            TaskKind::ModsumChain => vocab::TAG_MODSUM,
            TaskKind::MiniCountdown => vocab::TAG_COUNTDOWN,
            TaskKind::MiniSudoku => vocab::TAG_SUDOKU,
        }
    }

    pub fn reward_mode(&self) -> RewardMode {
        match self {
            TaskKind::MiniSudoku => RewardMode::CellAccuracy,
            _ => RewardMode::Binary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Binary,
    CellAccuracy,
}

/// Per-kind difficulty knobs.
///
/// `min_items..=max_items` is the payload length for copy/sort/modsum_chain, the number of
/// operands for mini_countdown (always 3) and the number of blank cells for mini_sudoku.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Difficulty {
    pub min_items: usize,
    pub max_items: usize,
    pub gen_len: usize,
    /// Sort only: drop repeated values from the answer.
    #[serde(default)]
    pub dedup: bool,
}

pub const MAX_PAYLOAD: usize = 16;
pub const MAX_CHAIN: usize = 8;
pub const COUNTDOWN_OPERANDS: usize = 3;
pub const COUNTDOWN_MAX_TARGET: i64 = 99;
pub const SUDOKU_MAX_BLANKS: usize = 12;

impl Difficulty {
    pub fn default_for(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Copy | TaskKind::Sort => Difficulty {
                min_items: 1,
                max_items: 8,
                gen_len: 12,
                dedup: false,
            },
            TaskKind::ModsumChain => Difficulty {
                min_items: 2,
                max_items: 6,
                gen_len: 8,
                dedup: false,
            },
            TaskKind::MiniCountdown => Difficulty {
                min_items: 3,
                max_items: 3,
                gen_len: 8,
                dedup: false,
            },
            TaskKind::MiniSudoku => Difficulty {
                min_items: 4,
                max_items: 8,
                gen_len: 20,
                dedup: false,
            },
        }
    }

    /// Longest answer (excluding the closing delimiter) this difficulty can produce.
    fn max_answer(&self, kind: TaskKind) -> usize {
        match kind {
            TaskKind::MiniCountdown => 2 * COUNTDOWN_OPERANDS - 1,
            TaskKind::MiniSudoku => sudoku::CELLS,
            _ => self.max_items,
        }
    }

    pub fn validate(&self, kind: TaskKind) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{} difficulty: {msg}", kind.name())));
        if self.min_items > self.max_items {
            return bad(format!("min_items {} > max_items {}", self.min_items, self.max_items));
        }
        let (lo, hi) = match kind {
            TaskKind::Copy | TaskKind::Sort => (1, MAX_PAYLOAD),
            TaskKind::ModsumChain => (1, MAX_CHAIN),
            TaskKind::MiniCountdown => (COUNTDOWN_OPERANDS, COUNTDOWN_OPERANDS),
            TaskKind::MiniSudoku => (1, SUDOKU_MAX_BLANKS),
        };
        if self.min_items < lo || self.max_items > hi {
            return bad(format!(
                "items {}..={} outside supported range {lo}..={hi}",
                self.min_items, self.max_items
            ));
        }
        if self.dedup && kind != TaskKind::Sort {
            return bad("dedup only applies to sort".into());
        }
        if self.gen_len < self.max_answer(kind) + 1 {
            return bad(format!(
                "gen_len {} cannot hold an answer of {} tokens plus the delimiter",
                self.gen_len,
                self.max_answer(kind)
            ));
        }
        Ok(())
    }

    /// Prompt length (including padding, tag and separator).
    pub fn prompt_len(&self, kind: TaskKind) -> usize {
        match kind {
            TaskKind::Copy | TaskKind::Sort | TaskKind::ModsumChain => self.max_items + 2,
            // tag, 3 operands, '=', two target digits, sep
            TaskKind::MiniCountdown => 2 * COUNTDOWN_OPERANDS + 2,
            TaskKind::MiniSudoku => sudoku::CELLS + 2,
        }
    }
}

/// A task instance: prompt tokens and the gold generation window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub prompt: Vec<usize>,
    pub gold: Vec<usize>,
    pub difficulty: Difficulty,
    pub hash: String,
}

fn instance_hash(kind: TaskKind, prompt: &[usize], gold: &[usize]) -> String {
    let mut h = Sha256::new();
    h.update(kind.name().as_bytes());
    for part in [prompt, gold] {
        h.update((part.len() as u64).to_le_bytes());
        for &t in part {
            h.update((t as u64).to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..16])
}

fn window(answer: &[usize], gen_len: usize) -> Vec<usize> {
    let mut w = answer.to_vec();
    w.push(EOA);
    w.resize(gen_len, EOS);
    w
}

impl TaskInstance {
    fn build(kind: TaskKind, difficulty: Difficulty, items: Vec<usize>, answer: &[usize]) -> Self {
        let mut prompt = Vec::with_capacity(difficulty.prompt_len(kind));
        let pad = difficulty.prompt_len(kind) - items.len() - 2;
        prompt.push(kind.tag());
        prompt.extend(items);
        prompt.extend(std::iter::repeat_n(PAD, pad));
        prompt.push(SEP);
        let gold = window(answer, difficulty.gen_len);
        let hash = instance_hash(kind, &prompt, &gold);
        TaskInstance {
            kind,
            prompt,
            gold,
            difficulty,
            hash,
        }
    }

    /// Prompt followed by the gold window.
    pub fn sequence(&self) -> Vec<usize> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.gold);
        s
    }

    pub fn gen_len(&self) -> usize {
        self.gold.len()
    }

    /// Payload tokens between the task tag and the padding/separator.
    fn items(&self) -> &[usize] {
        let start = self
            .prompt
            .iter()
            .position(|&t| t == self.kind.tag())
            .map_or(0, |p| p + 1);
        let end = self.prompt[start..]
            .iter()
            .position(|&t| t == PAD || t == SEP)
            .map_or(self.prompt.len(), |p| start + p);
        &self.prompt[start..end]
    }

    /// Reward of a generated window. Total: malformed output scores 0.
    pub fn reward(&self, generated: &[usize]) -> f64 {
        match self.kind {
            TaskKind::MiniSudoku => {
                let sol = answer_of(&self.gold);
                let correct = (0..sudoku::CELLS)
                    .filter(|&i| generated.get(i).is_some_and(|t| sol.get(i) == Some(t)))
                    .count();
                correct as f64 / sudoku::CELLS as f64
            }
            TaskKind::MiniCountdown => {
                let Some(ans) = parse_answer(generated) else {
                    return 0.0;
                };
                f64::from(u8::from(countdown_ok(self.items(), ans)))
            }
            _ => {
                let Some(ans) = parse_answer(generated) else {
                    return 0.0;
                };
                f64::from(u8::from(ans == answer_of(&self.gold)))
            }
        }
    }

    /// Recomputes the hash and checks the gold window against the verifier.
    pub fn check(&self) -> Result<()> {
        if instance_hash(self.kind, &self.prompt, &self.gold) != self.hash {
            return Err(Error::Integrity(format!("instance hash mismatch for {}", self.hash)));
        }
        if self.prompt.len() != self.difficulty.prompt_len(self.kind)
            || self.gold.len() != self.difficulty.gen_len
        {
            return Err(Error::Integrity(format!("instance {} has the wrong layout", self.hash)));
        }
        if self.reward(&self.gold) != 1.0 {
            return Err(Error::Integrity(format!(
                "gold answer of {} fails its verifier",
                self.hash
            )));
        }
        Ok(())
    }

    /// Deterministic split bucket: true when the hash falls in the test fraction.
    pub fn in_test_split(&self, test_fraction: f64) -> bool {
        let bytes = hex::decode(&self.hash[..16]).unwrap_or_default();
        let mut b = [0u8; 8];
        b[..bytes.len().min(8)].copy_from_slice(&bytes[..bytes.len().min(8)]);
        (u64::from_be_bytes(b) as f64 / u64::MAX as f64) < test_fraction
    }
}

/// Tokens before the first `[EOA]`, if the answer is closed and contains no EOS/mask.
fn parse_answer(generated: &[usize]) -> Option<&[usize]> {
    let end = generated.iter().position(|&t| t == EOA)?;
    let ans = &generated[..end];
    ans.iter()
        .all(|&t| t != EOS && t != vocab::MASK && t != PAD)
        .then_some(ans)
}

fn answer_of(gold: &[usize]) -> &[usize] {
    let end = gold.iter().position(|&t| t == EOA).unwrap_or(gold.len());
    &gold[..end]
}

fn countdown_ok(items: &[usize], ans: &[usize]) -> bool {
    // items: a b c = t1 t2
    if items.len() != 2 * COUNTDOWN_OPERANDS || ans.len() != 2 * COUNTDOWN_OPERANDS - 1 {
        return false;
    }
    let (Some(t1), Some(t2)) = (as_digit(items[4]), as_digit(items[5])) else {
        return false;
    };
    let target = (t1 * 10 + t2) as i64;
    let mut want: Vec<usize> = items[..3].to_vec();
    let mut got: Vec<usize> = ans.iter().step_by(2).copied().collect();
    want.sort_unstable();
    got.sort_unstable();
    if want != got {
        return false;
    }
    let Some(mut acc) = as_digit(ans[0]).map(|d| d as i64) else {
        return false;
    };
    for pair in ans[1..].chunks(2) {
        let Some(x) = as_digit(pair[1]).map(|d| d as i64) else {
            return false;
        };
        acc = match pair[0] {
            vocab::PLUS => acc + x,
            vocab::MINUS => acc - x,
            vocab::TIMES => acc * x,
            _ => return false,
        };
    }
    acc == target
}

fn generate_one<R: Rng + ?Sized>(kind: TaskKind, d: &Difficulty, rng: &mut R) -> TaskInstance {
    match kind {
        TaskKind::Copy | TaskKind::Sort | TaskKind::ModsumChain => {
            let n = rng.random_range(d.min_items..=d.max_items);
            let vals: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
            let answer: Vec<usize> = match kind {
                TaskKind::Copy => vals.clone(),
                TaskKind::Sort => {
                    let mut s = vals.clone();
                    s.sort_unstable();
                    if d.dedup {
                        s.dedup();
                    }
                    s
                }
                _ => vals
                    .iter()
                    .scan(0, |acc, &v| {
                        *acc = (*acc + v) % 10;
                        Some(*acc)
                    })
                    .collect(),
            };
            TaskInstance::build(
                kind,
                *d,
                vals.into_iter().map(digit).collect(),
                &answer.into_iter().map(digit).collect::<Vec<_>>(),
            )
        }
        TaskKind::MiniCountdown => loop {
            let ops: Vec<usize> = (0..COUNTDOWN_OPERANDS).map(|_| rng.random_range(1..10)).collect();
            let mut order = ops.clone();
            order.shuffle(rng);
            let mut acc = order[0] as i64;
            let mut answer = vec![digit(order[0])];
            for &x in &order[1..] {
                let op = [vocab::PLUS, vocab::MINUS, vocab::TIMES][rng.random_range(0..3)];
                acc = match op {
                    vocab::PLUS => acc + x as i64,
                    vocab::MINUS => acc - x as i64,
                    _ => acc * x as i64,
                };
                answer.push(op);
                answer.push(digit(x));
            }
            if !(0..=COUNTDOWN_MAX_TARGET).contains(&acc) {
                continue;
            }
            let mut items: Vec<usize> = ops.iter().map(|&o| digit(o)).collect();
            items.push(vocab::EQUALS);
            items.push(digit((acc / 10) as usize));
            items.push(digit((acc % 10) as usize));
            break TaskInstance::build(kind, *d, items, &answer);
        },
        TaskKind::MiniSudoku => loop {
            let blanks = rng.random_range(d.min_items..=d.max_items);
            let sol = sudoku::random_solution(rng);
            let Some(puzzle) = sudoku::make_puzzle(&sol, blanks, rng) else {
                continue;
            };
            let items = puzzle
                .iter()
                .map(|&v| if v == 0 { BLANK } else { digit(v as usize) })
                .collect();
            let answer: Vec<usize> = sol.iter().map(|&v| digit(v as usize)).collect();
            break TaskInstance::build(kind, *d, items, &answer);
        },
    }
}

/// Draws `count` i.i.d. instances.
pub fn generate<R: Rng + ?Sized>(
    kind: TaskKind,
    difficulty: &Difficulty,
    rng: &mut R,
    count: usize,
) -> Result<Vec<TaskInstance>> {
    difficulty.validate(kind)?;
    Ok((0..count).map(|_| generate_one(kind, difficulty, rng)).collect())
}

/// Train/test instances drawn from one stream and split by instance hash, so no hash
/// can land in both.
pub fn generate_split<R: Rng + ?Sized>(
    kind: TaskKind,
    difficulty: &Difficulty,
    rng: &mut R,
    train: usize,
    test: usize,
    test_fraction: f64,
) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
    difficulty.validate(kind)?;
    if !(0.0..1.0).contains(&test_fraction) || (test > 0 && test_fraction == 0.0) {
        return Err(Error::Config(format!("test_fraction {test_fraction} outside (0, 1)")));
    }
    let (mut tr, mut te) = (Vec::with_capacity(train), Vec::with_capacity(test));
    let mut draws = 0usize;
    while tr.len() < train || te.len() < test {
        draws += 1;
        if draws > 1000 * (train + test + 1) {
            return Err(Error::Config(format!(
                "{} instance space too small for {train} train / {test} test",
                kind.name()
            )));
        }
        let inst = generate_one(kind, difficulty, rng);
        if inst.in_test_split(test_fraction) {
            if te.len() < test {
                te.push(inst);
            }
        } else if tr.len() < train {
            tr.push(inst);
        }
    }
    Ok((tr, te))
}

pub fn to_jsonl(instances: &[TaskInstance]) -> Result<String> {
    let mut out = String::new();
    for i in instances {
        out.push_str(&serde_json::to_string(i)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses and validates an instance file (hash, layout, and gold-verifier consistency).
pub fn from_jsonl<B: BufRead>(reader: B) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: TaskInstance = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        inst.difficulty
            .validate(inst.kind)
            .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        if inst.prompt.iter().chain(&inst.gold).any(|&t| t >= vocab::STANDARD_SIZE) {
            return Err(Error::Format(format!("line {}: token outside vocabulary", n + 1)));
        }
        inst.check()
            .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        out.push(inst);
    }
    Ok(out)
}
