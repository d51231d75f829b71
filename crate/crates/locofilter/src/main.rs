fn main() -> std::process::ExitCode {
    locofilter::cli::main()
}
