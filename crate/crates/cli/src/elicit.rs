use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Write};

use anyhow::{anyhow, Context};
use futures::StreamExt;
use selconf_core::elicitation::{parse_questions, ChatClient, PromptTemplate, ProviderConfig};
use selconf_core::records::read_records_file;

use crate::{data, transport, usage, CliResult, ElicitArgs};

pub fn run(a: ElicitArgs) -> CliResult {
    let mut config = ProviderConfig::load(&a.provider_config).map_err(usage)?;
    if let Some(rpm) = a.rpm {
        config.requests_per_minute = rpm;
    }
    if a.concurrency == 0 {
        return Err(usage(anyhow!("--concurrency must be positive")));
    }
    let want_prob = config.logprobs_requested;
    let client = ChatClient::new(config).map_err(usage)?;
    let template = PromptTemplate::builtin(&a.template).expect("clap restricts template ids");

    let file = File::open(&a.input)
        .with_context(|| format!("opening {}", a.input.display()))
        .map_err(data)?;
    let questions = parse_questions(BufReader::new(file))
        .with_context(|| format!("reading {}", a.input.display()))
        .map_err(data)?;

    let done: HashSet<(String, String)> = if a.output.exists() {
        read_records_file(&a.output)
            .with_context(|| format!("reading existing {}", a.output.display()))
            .map_err(data)?
            .records()
            .iter()
            .map(|r| (r.dataset_id.clone(), r.example_id.clone()))
            .collect()
    } else {
        HashSet::new()
    };
    let todo: Vec<_> = questions
        .into_iter()
        .filter(|q| !done.contains(&(q.dataset_id.clone(), q.example_id.clone())))
        .collect();
    let skipped = done.len();
    if todo.is_empty() {
        eprintln!("nothing to do: all questions already in {}", a.output.display());
        return Ok(());
    }

    let mut out = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&a.output)
        .with_context(|| format!("opening {}", a.output.display()))
        .map_err(data)?;
    let prob_source = want_prob.then_some(a.prob_source.as_str());

    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(data)?;
    let total = todo.len();
    let (written, failures, error) = rt.block_on(async {
        let mut written = 0usize;
        let mut failures: BTreeMap<&'static str, usize> = BTreeMap::new();
        let mut results = client.elicit_all(todo, &template, a.concurrency);
        while let Some((q, r)) = results.next().await {
            let r = match r {
                Ok(r) => r,
                Err(e) => return (written, failures, Some(e)),
            };
            if let Some(f) = r.failure {
                *failures.entry(f.as_str()).or_default() += 1;
            }
            if let Some(f) = r.probability_failure {
                *failures.entry(f.as_str()).or_default() += 1;
            }
            let line = r.to_record(&q, &a.source, prob_source).to_json_line();
            if let Err(e) = out.write_all(format!("{line}\n").as_bytes()).and_then(|_| out.flush()) {
                return (written, failures, Some(e.into()));
            }
            written += 1;
        }
        (written, failures, None)
    });

    eprintln!("wrote {written} of {total} record(s) to {} ({skipped} already present)", a.output.display());
    if !failures.is_empty() {
        let parts: Vec<String> = failures.iter().map(|(k, v)| format!("{k}={v}")).collect();
        eprintln!("warning: unparsed generations: {}", parts.join(", "));
    }
    match error {
        None => Ok(()),
        Some(e) if e.is_transport() => Err(transport(anyhow!(e).context("partial output kept; rerun to resume"))),
        Some(e) => Err(data(e)),
    }
}
