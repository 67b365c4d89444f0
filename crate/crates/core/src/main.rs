fn main() -> std::process::ExitCode {
    planar_rect::cli::main()
}
