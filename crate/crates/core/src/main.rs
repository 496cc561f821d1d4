fn main() -> std::process::ExitCode {
    relgen::cli::main_with_args(std::env::args_os())
}
