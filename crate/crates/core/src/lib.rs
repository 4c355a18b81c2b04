pub mod analysis;
pub mod cli;
pub mod corpus;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
