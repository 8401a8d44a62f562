pub mod head_cases;
pub mod naive_felz;
pub mod naive_head;
