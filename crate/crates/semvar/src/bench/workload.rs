//! Synthetic application workloads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use semvar_core::prompt::PerfCriterion;
use semvar_core::VirtualTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::corpus::Corpus;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid workload spec: {0}")]
pub struct InvalidSpec(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadKind {
    ChainSummary,
    MapReduceSummary,
    SharedPromptServing,
    MultiAgentRounds,
    ChatStream,
    Mixed,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 6] = [
        WorkloadKind::ChainSummary,
        WorkloadKind::MapReduceSummary,
        WorkloadKind::SharedPromptServing,
        WorkloadKind::MultiAgentRounds,
        WorkloadKind::ChatStream,
        WorkloadKind::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::ChainSummary => "chain-summary",
            WorkloadKind::MapReduceSummary => "map-reduce-summary",
            WorkloadKind::SharedPromptServing => "shared-prompt-serving",
            WorkloadKind::MultiAgentRounds => "multi-agent-rounds",
            WorkloadKind::ChatStream => "chat-stream",
            WorkloadKind::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub seed: u64,
    pub chunk_size: usize,
    pub chunk_count: usize,
    pub output_len: usize,
    pub system_prompt_len: usize,
    pub unique_len: usize,
    pub user_count: usize,
    pub file_count: usize,
    pub review_rounds: usize,
    /// Chat requests per second.
    pub arrival_rate: f64,
    pub request_count: usize,
    pub chat_prompt_len: [usize; 2],
    pub chat_output_len: [usize; 2],
    pub rtt_ms_range: [f64; 2],
    pub background_clients: usize,
    pub background_prompt_len: usize,
    pub background_output_len: usize,
    /// Map-reduce applications in the mixed workload.
    pub app_count: usize,
    pub app_spacing_ms: f64,
}

impl WorkloadSpec {
    pub fn preset(kind: WorkloadKind) -> Self {
        let base = WorkloadSpec {
            kind,
            seed: 0,
            chunk_size: 2000,
            chunk_count: 10,
            output_len: 50,
            system_prompt_len: 6000,
            unique_len: 200,
            user_count: 64,
            file_count: 4,
            review_rounds: 3,
            arrival_rate: 1.0,
            request_count: 40,
            chat_prompt_len: [200, 800],
            chat_output_len: [50, 300],
            rtt_ms_range: [200.0, 300.0],
            background_clients: 0,
            background_prompt_len: 1000,
            background_output_len: 400,
            app_count: 40,
            app_spacing_ms: 1000.0,
        };
        match kind {
            WorkloadKind::MapReduceSummary | WorkloadKind::Mixed => WorkloadSpec { chunk_count: 8, ..base },
            WorkloadKind::SharedPromptServing => WorkloadSpec { output_len: 180, ..base },
            WorkloadKind::MultiAgentRounds => WorkloadSpec { output_len: 200, system_prompt_len: 1500, ..base },
            _ => base,
        }
    }

    /// Parses a TOML table whose `kind` picks the preset the other keys override.
    pub fn from_toml(text: &str) -> Result<Self, InvalidSpec> {
        let table: toml::Table = toml::from_str(text).map_err(|e| InvalidSpec(e.to_string()))?;
        let kind = table
            .get("kind")
            .and_then(|k| k.as_str())
            .and_then(WorkloadKind::parse)
            .ok_or_else(|| InvalidSpec("missing or unknown `kind`".into()))?;
        let mut merged = toml::Table::try_from(Self::preset(kind)).expect("preset serializes");
        for (k, v) in table {
            merged.insert(k, v);
        }
        let spec: WorkloadSpec = merged.try_into().map_err(|e: toml::de::Error| InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), InvalidSpec> {
        let fail = |m: &str| Err(InvalidSpec(m.into()));
        let [lo, hi] = self.rtt_ms_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return fail("rtt_ms_range must satisfy 0 <= lo <= hi");
        }
        if self.output_len == 0 {
            return fail("output_len must be positive");
        }
        match self.kind {
            WorkloadKind::ChainSummary | WorkloadKind::MapReduceSummary if self.chunk_count == 0 || self.chunk_size == 0 => {
                fail("chunk_count and chunk_size must be positive")
            }
            WorkloadKind::SharedPromptServing if self.user_count == 0 || self.unique_len == 0 => {
                fail("user_count and unique_len must be positive")
            }
            WorkloadKind::MultiAgentRounds if self.file_count == 0 || self.review_rounds == 0 => {
                fail("file_count and review_rounds must be positive")
            }
            WorkloadKind::ChatStream | WorkloadKind::Mixed => {
                if !(self.arrival_rate.is_finite() && self.arrival_rate > 0.0) {
                    return fail("arrival_rate must be positive");
                }
                if self.chat_prompt_len[0] > self.chat_prompt_len[1] || self.chat_output_len[0] > self.chat_output_len[1] {
                    return fail("length ranges must satisfy lo <= hi");
                }
                if self.chat_output_len[0] == 0 {
                    return fail("chat outputs must be non-empty");
                }
                if self.kind == WorkloadKind::Mixed && (self.chunk_count == 0 || self.chunk_size == 0) {
                    return fail("chunk_count and chunk_size must be positive");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    /// A value the client sets.
    Const(String),
    /// The output of an earlier call of the same application.
    Output(usize),
}

/// One semantic-function call. The template's output placeholder is `out`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Call {
    pub prompt: String,
    pub inputs: Vec<(String, Source)>,
    pub script: String,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct App {
    pub kind: &'static str,
    pub start: VirtualTime,
    pub calls: Vec<Call>,
    pub finals: Vec<(usize, PerfCriterion)>,
    /// Resubmits itself on completion until the foreground finishes.
    pub closed_loop: bool,
    /// Client round trips apply to this app under client-side orchestration.
    pub client_rtt: bool,
}

impl App {
    fn foreground(kind: &'static str, start: VirtualTime, calls: Vec<Call>, finals: Vec<(usize, PerfCriterion)>) -> Self {
        App { kind, start, calls, finals, closed_loop: false, client_rtt: true }
    }
}

struct Gen {
    corpus: Corpus,
    rng: ChaCha8Rng,
}

impl Gen {
    fn words(&mut self, n: usize) -> String {
        self.corpus.words(&mut self.rng, n)
    }

    fn range(&mut self, [lo, hi]: [usize; 2]) -> usize {
        self.rng.random_range(lo..=hi)
    }
}

fn chain(g: &mut Gen, s: &WorkloadSpec) -> App {
    let mut calls = Vec::new();
    for k in 0..s.chunk_count {
        let (prompt, mut inputs) = if k == 0 {
            ("Summarize the following part of a document.\nPart:{{input:chunk}}\nSummary:{{output:out}}", vec![])
        } else {
            (
                "Summarize the document so far.\nSummary so far:{{input:prev}}\nNext part:{{input:chunk}}\nSummary:{{output:out}}",
                vec![("prev".to_string(), Source::Output(k - 1))],
            )
        };
        inputs.push(("chunk".into(), Source::Const(format!(" {}", g.words(s.chunk_size)))));
        calls.push(Call { prompt: prompt.into(), inputs, script: g.words(s.output_len), max_tokens: s.output_len });
    }
    let last = calls.len() - 1;
    App::foreground("chain", VirtualTime::ZERO, calls, vec![(last, PerfCriterion::Latency)])
}

fn map_reduce(g: &mut Gen, s: &WorkloadSpec, start: VirtualTime) -> App {
    let mut calls = Vec::new();
    for _ in 0..s.chunk_count {
        calls.push(Call {
            prompt: "Summarize this part of a long document.\nPart:{{input:chunk}}\nSummary:{{output:out}}".into(),
            inputs: vec![("chunk".into(), Source::Const(format!(" {}", g.words(s.chunk_size))))],
            script: g.words(s.output_len),
            max_tokens: s.output_len,
        });
    }
    let mut prompt = String::from("Combine the partial summaries into one summary.\n");
    let mut inputs = Vec::new();
    for i in 0..s.chunk_count {
        prompt.push_str(&format!("Part {i}:{{{{input:p{i}}}}}\n"));
        inputs.push((format!("p{i}"), Source::Output(i)));
    }
    prompt.push_str("Summary:{{output:out}}");
    calls.push(Call { prompt, inputs, script: g.words(s.output_len), max_tokens: s.output_len });
    let reduce = calls.len() - 1;
    App::foreground("map-reduce", start, calls, vec![(reduce, PerfCriterion::Latency)])
}

fn shared_prompt(g: &mut Gen, s: &WorkloadSpec) -> Vec<App> {
    let system = g.words(s.system_prompt_len);
    (0..s.user_count)
        .map(|_| {
            let query = format!(" {}", g.words(s.unique_len - 1));
            let call = Call {
                prompt: format!("{system}{{{{input:query}}}}{{{{output:out}}}}"),
                inputs: vec![("query".into(), Source::Const(query))],
                script: g.words(s.output_len),
                max_tokens: s.output_len,
            };
            App::foreground("gpts", VirtualTime::ZERO, vec![call], vec![(0, PerfCriterion::Throughput)])
        })
        .collect()
}

fn multi_agent(g: &mut Gen, s: &WorkloadSpec) -> App {
    let arch_sys = g.words(s.system_prompt_len);
    let coder_sys = g.words(s.system_prompt_len);
    let reviewer_sys = g.words(s.system_prompt_len);
    let task = g.words(100);
    let mut calls = vec![Call {
        prompt: format!("{arch_sys}\nTask:{{{{input:task}}}}\nDesign:{{{{output:out}}}}"),
        inputs: vec![("task".into(), Source::Const(format!(" {task}")))],
        script: g.words(s.output_len),
        max_tokens: s.output_len,
    }];
    let mut reviews: Vec<Option<usize>> = vec![None; s.file_count];
    let mut codes = Vec::new();
    for _round in 0..s.review_rounds {
        codes.clear();
        for (f, review) in reviews.iter().enumerate() {
            let mut inputs = vec![("design".to_string(), Source::Output(0))];
            let prompt = match review {
                Some(r) => {
                    inputs.push(("review".into(), Source::Output(*r)));
                    format!("{coder_sys}\nFile {f}.\nDesign:{{{{input:design}}}}\nReview:{{{{input:review}}}}\nCode:{{{{output:out}}}}")
                }
                None => format!("{coder_sys}\nFile {f}.\nDesign:{{{{input:design}}}}\nCode:{{{{output:out}}}}"),
            };
            calls.push(Call { prompt, inputs, script: g.words(s.output_len), max_tokens: s.output_len });
            codes.push(calls.len() - 1);
        }
        for (f, &code) in codes.iter().enumerate() {
            calls.push(Call {
                prompt: format!("{reviewer_sys}\nCode:{{{{input:code}}}}\nReview:{{{{output:out}}}}"),
                inputs: vec![("code".into(), Source::Output(code))],
                script: g.words(s.output_len / 2 + 1),
                max_tokens: s.output_len / 2 + 1,
            });
            reviews[f] = Some(calls.len() - 1);
        }
    }
    let finals = codes.iter().map(|&c| (c, PerfCriterion::Latency)).collect();
    // the last round's reviews are not needed by anyone
    calls.truncate(codes.last().copied().unwrap_or(0) + 1);
    App::foreground("multi-agent", VirtualTime::ZERO, calls, finals)
}

fn chat_stream(g: &mut Gen, s: &WorkloadSpec) -> Vec<App> {
    let exp = Exp::new(s.arrival_rate).expect("arrival rate validated");
    let mut t = 0.0f64;
    let mut apps = Vec::new();
    for _ in 0..s.request_count {
        t += exp.sample(&mut g.rng) * 1000.0;
        let plen = g.range(s.chat_prompt_len);
        let olen = g.range(s.chat_output_len);
        let call = Call {
            prompt: "You are a helpful assistant.\nUser:{{input:msg}}\nAssistant:{{output:out}}".into(),
            inputs: vec![("msg".into(), Source::Const(format!(" {}", g.words(plen))))],
            script: g.words(olen),
            max_tokens: olen,
        };
        apps.push(App::foreground("chat", VirtualTime::from_ms(t), vec![call], vec![(0, PerfCriterion::Latency)]));
    }
    apps
}

fn background(g: &mut Gen, s: &WorkloadSpec) -> Vec<App> {
    (0..s.background_clients)
        .map(|_| App {
            kind: "background",
            start: VirtualTime::ZERO,
            calls: vec![Call {
                prompt: "Continue the story.\nStory:{{input:story}}\nContinuation:{{output:out}}".into(),
                inputs: vec![("story".into(), Source::Const(format!(" {}", g.words(s.background_prompt_len))))],
                script: g.words(s.background_output_len),
                max_tokens: s.background_output_len,
            }],
            finals: vec![],
            closed_loop: true,
            client_rtt: false,
        })
        .collect()
}

/// Applications of `spec`, fully determined by its seed.
pub fn generate_workload(spec: &WorkloadSpec) -> Result<Vec<App>, InvalidSpec> {
    spec.validate()?;
    let mut g = Gen { corpus: Corpus::new(), rng: ChaCha8Rng::seed_from_u64(spec.seed) };
    let mut apps = match spec.kind {
        WorkloadKind::ChainSummary => vec![chain(&mut g, spec)],
        WorkloadKind::MapReduceSummary => vec![map_reduce(&mut g, spec, VirtualTime::ZERO)],
        WorkloadKind::SharedPromptServing => shared_prompt(&mut g, spec),
        WorkloadKind::MultiAgentRounds => vec![multi_agent(&mut g, spec)],
        WorkloadKind::ChatStream => chat_stream(&mut g, spec),
        WorkloadKind::Mixed => {
            let mut apps = chat_stream(&mut g, spec);
            for k in 0..spec.app_count {
                let start = VirtualTime::from_ms(k as f64 * spec.app_spacing_ms);
                apps.push(map_reduce(&mut g, spec, start));
            }
            apps
        }
    };
    apps.extend(background(&mut g, spec));
    Ok(apps)
}
