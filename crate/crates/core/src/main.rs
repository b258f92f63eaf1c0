fn main() -> std::process::ExitCode {
    formseek::cli::main()
}
