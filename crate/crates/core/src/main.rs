fn main() {
    std::process::exit(forgetrace::cli::dispatch(std::env::args_os()));
}
