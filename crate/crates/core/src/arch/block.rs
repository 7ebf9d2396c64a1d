use crate::arch::config::ChoiceModuleConfig;
use crate::arch::module::ChoiceModule;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{Builder, Dropout};
use crate::params::Forward;

/// Input width of each module in a densely wired block: module `i`
/// consumes the block input plus every earlier module output.
pub fn module_input_channels(in_channels: usize, bottleneck: usize, branch: usize, modules: usize) -> Vec<usize> {
    let width = 6 * branch + bottleneck;
    (0..modules).map(|i| in_channels + i * width).collect()
}

/// Densely connected stack of ChoiceModules. The block output is the last
/// module's output.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceBlock {
    pub modules: Vec<ChoiceModule>,
    pub dropout: Dropout,
}

impl ChoiceBlock {
    /// `template.in_channels` is the block input width; each later module's
    /// input width follows from the dense wiring.
    pub fn new(b: &mut Builder, name: &str, template: ChoiceModuleConfig, modules: usize, dropout: Dropout) -> Result<Self> {
        if modules == 0 {
            return Err(Error::Config("a block needs at least one module".into()));
        }
        let widths = module_input_channels(
            template.in_channels,
            template.bottleneck_channels,
            template.branch_channels,
            modules,
        );
        let modules = widths
            .into_iter()
            .enumerate()
            .map(|(i, in_channels)| {
                ChoiceModule::new(b, &format!("{name}.module{}", i + 1), ChoiceModuleConfig { in_channels, ..template })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ChoiceBlock { modules, dropout })
    }

    pub fn in_channels(&self) -> usize {
        self.modules[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.modules.last().map_or(0, ChoiceModule::out_channels)
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        // newest output first, block input last
        let mut stream = vec![x];
        let mut last = x;
        for module in &self.modules {
            let input = if stream.len() == 1 { x } else { f.tape.concat_channels(&stream)? };
            let out = module.forward(f, input)?;
            last = self.dropout.forward(f, out)?;
            stream.insert(0, last);
        }
        Ok(last)
    }

    pub fn param_count(template: &ChoiceModuleConfig, modules: usize) -> usize {
        module_input_channels(template.in_channels, template.bottleneck_channels, template.branch_channels, modules)
            .into_iter()
            .map(|in_channels| ChoiceModule::param_count(&ChoiceModuleConfig { in_channels, ..*template }))
            .sum()
    }
}
