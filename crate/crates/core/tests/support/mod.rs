pub mod gradcases;
