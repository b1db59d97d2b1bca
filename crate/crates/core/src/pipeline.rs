//! End-to-end inference: encode, route, retrieve demonstrations, build the
//! prompt, generate and parse.

use thiserror::Error;

use crate::adapter::AdapterPool;
use crate::backend::{BackendError, GenerationBackend};
use crate::batch::{plan_batch, BatchError, BatchPlan};
use crate::encoder::{EncodeError, Encoder, EncoderSpec};
use crate::index::{CorpusSample, EntityMention, ExampleIndex, IndexError};
use crate::prompt::{
    annotations_from_mentions, build_input, parse_output, serialize_target, Annotation, ContextExample,
    ParseError, PromptBundle, PromptTemplates, TemplateError,
};
use crate::router::{route_excluding, RouteError, RouterConfig, RoutingDecision};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("encoder {encoder:?} does not match the index encoder {index:?}")]
    EncoderMismatch { index: EncoderSpec, encoder: EncoderSpec },
    #[error("sample `{sample_id}`: {source}")]
    Encode {
        sample_id: String,
        #[source]
        source: EncodeError,
    },
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Batch(#[from] BatchError),
}

/// A routed sample with its prompt, ready for generation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub decision: RoutingDecision,
    pub bundle: PromptBundle,
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub decision: RoutingDecision,
    pub bundle: PromptBundle,
    pub output: String,
    pub parsed: Result<Vec<Annotation>, ParseError>,
}

pub struct Pipeline<'a> {
    pub pool: &'a AdapterPool,
    pub index: &'a ExampleIndex,
    pub encoder: &'a dyn Encoder,
    pub templates: &'a PromptTemplates,
    pub backend: &'a GenerationBackend,
    pub router: RouterConfig,
    /// Keep a sample's own records out of its routing votes and examples.
    /// Needed whenever the inputs are themselves indexed.
    pub exclude_self: bool,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        pool: &'a AdapterPool,
        index: &'a ExampleIndex,
        encoder: &'a dyn Encoder,
        templates: &'a PromptTemplates,
        backend: &'a GenerationBackend,
        router: RouterConfig,
    ) -> Result<Self, PipelineError> {
        if encoder.spec() != index.spec() {
            return Err(PipelineError::EncoderMismatch {
                index: index.spec(),
                encoder: encoder.spec(),
            });
        }
        router.retrieval.validate()?;
        templates.validate()?;
        Ok(Self {
            pool,
            index,
            encoder,
            templates,
            backend,
            router,
            exclude_self: true,
        })
    }

    /// Routes one input and assembles its prompt. `gold` becomes the
    /// expected target used by the oracle backend.
    pub fn prepare(
        &self,
        sample_id: &str,
        text: &str,
        gold: Option<&[EntityMention]>,
    ) -> Result<Prepared, PipelineError> {
        let query = self.encoder.encode(text).map_err(|source| PipelineError::Encode {
            sample_id: sample_id.to_string(),
            source,
        })?;
        let exclude = self.exclude_self.then_some(sample_id);
        let decision = route_excluding(self.pool, self.index, &query, &self.router, exclude)?;

        let cfg = &self.router.retrieval;
        let mut entity_examples = Vec::new();
        for entity_type in self.index.entity_types() {
            let mut texts: Vec<String> = Vec::new();
            for hit in self.index.retrieve_entities(&query, entity_type, cfg, exclude)? {
                let text = &self.index.entities()[hit.record].entity_text;
                if !texts.contains(text) {
                    texts.push(text.clone());
                }
            }
            entity_examples.push((entity_type.clone(), texts));
        }
        let context_examples: Vec<ContextExample> = self
            .index
            .retrieve_context(&query, cfg, exclude)?
            .iter()
            .map(|hit| {
                let rec = &self.index.contexts()[hit.record];
                ContextExample {
                    text: rec.text.clone(),
                    annotations: annotations_from_mentions(&rec.entities),
                }
            })
            .collect();

        let input_text = build_input(text, &entity_examples, &context_examples, self.templates)?;
        Ok(Prepared {
            decision,
            bundle: PromptBundle {
                source_sample_id: sample_id.to_string(),
                input_text,
                expected_target: gold.map(|g| serialize_target(&annotations_from_mentions(g))),
                entity_examples,
                context_examples,
            },
        })
    }

    pub fn generate(&self, prepared: Prepared) -> Result<SampleOutcome, PipelineError> {
        let output = self.backend.generate(&prepared.bundle)?;
        let parsed = parse_output(&output);
        Ok(SampleOutcome {
            sample_id: prepared.bundle.source_sample_id.clone(),
            decision: prepared.decision,
            bundle: prepared.bundle,
            output,
            parsed,
        })
    }

    pub fn process(&self, sample: &CorpusSample) -> Result<SampleOutcome, PipelineError> {
        let prepared = self.prepare(&sample.sample_id, &sample.text, Some(&sample.entities))?;
        self.generate(prepared)
    }

    /// Routes a batch, plans it, and generates adapter group by adapter
    /// group. Outcomes come back in input order.
    pub fn process_batch(
        &self,
        inputs: &[(String, String, Option<Vec<EntityMention>>)],
    ) -> Result<(BatchPlan, Vec<SampleOutcome>), PipelineError> {
        let prepared = inputs
            .iter()
            .map(|(id, text, gold)| self.prepare(id, text, gold.as_deref()))
            .collect::<Result<Vec<_>, _>>()?;
        let decisions: Vec<RoutingDecision> = prepared.iter().map(|p| p.decision.clone()).collect();
        let plan = plan_batch(&decisions, self.pool)?;

        let mut slots: Vec<Option<Prepared>> = prepared.into_iter().map(Some).collect();
        let mut outcomes: Vec<Option<SampleOutcome>> = vec![None; slots.len()];
        for group in plan.groups() {
            for i in group {
                let p = slots[i].take().expect("each sample is in exactly one group");
                outcomes[i] = Some(self.generate(p)?);
            }
        }
        let outcomes = outcomes
            .into_iter()
            .map(|o| o.expect("every sample was generated"))
            .collect();
        Ok((plan, outcomes))
    }
}
