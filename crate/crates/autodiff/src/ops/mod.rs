pub(crate) mod arith;
pub(crate) mod conv;
pub(crate) mod norm;
pub(crate) mod spatial;
