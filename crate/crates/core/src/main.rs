fn main() {
    std::process::exit(roi_eval::cli::main_with_args(std::env::args_os()));
}
