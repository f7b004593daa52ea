//! Quantized inference: integer and fake-quant linears, recipes and the
//! quantized model.

mod linear;
mod model;
mod recipe;

pub use linear::{row_sums, ActMode, ExecPath, PhaseTimes, QuantizedLinear, WeightCodes};
pub use model::{calibrate_hidden_ranges, quantized_model_forward, Ablation, ExecOptions, QuantizedModel, HIDDEN_BITS};
pub use recipe::{
    export_recipe, import_recipe, import_recipe_for, CalibMeta, Flags, HiddenRange, LayerRecipe, Recipe, FLOAT_BITS,
    RECIPE_VERSION,
};
