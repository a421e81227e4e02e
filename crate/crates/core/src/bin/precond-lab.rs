fn main() {
    std::process::exit(precond_lab::cli::cli_main(std::env::args_os()));
}
